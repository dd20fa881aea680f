// Regenerates the committed fixture tree: make_fixtures [OUT_DIR]
#include <iostream>

#include "fixtures.hpp"
#include "rocr/error.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : rocr::fixtures::root();
  try {
    rocr::fixtures::write_all(out);
  } catch (const rocr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cout << "fixtures written to " << out.string() << "\n";
  return 0;
}
