#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rocr/model.hpp"

namespace rocr {

// Running sum of k k^T over preserved keys at one layer. The preserved
// outputs are never stored: the unedited down-projection already maps these
// keys to them.
struct CovarianceStats {
  int layer = 0;
  Mat second_moment;
  std::int64_t n_keys = 0;
  std::string corpus_digest;
  std::int64_t skipped_lines = 0;

  static CovarianceStats zeros(int layer, int d_mlp);

  void add_key(const Vec& key);
  void add_keys(const Mat& rows);  // one key per row
  // Associative merge of partial sums over disjoint key sets.
  void merge(const CovarianceStats& other);
  int dim() const { return static_cast<int>(second_moment.rows()); }
};

struct CovarianceOptions {
  std::int64_t max_keys = 100000;
  int threads = 1;
};

// Collects every token position of every corpus line (blank lines skipped,
// lines longer than max_seq_len split into windows, lines that fail to
// tokenize counted in skipped_lines) up to max_keys positions in corpus order,
// for all requested layers in one pass.
std::vector<CovarianceStats> accumulate_covariances(const ModelBundle& bundle, const std::vector<std::string>& corpus,
                                                    const std::vector<int>& layers,
                                                    const CovarianceOptions& options = {});

CovarianceStats accumulate_covariance(const ModelBundle& bundle, const std::vector<std::string>& corpus, int layer,
                                      std::int64_t max_keys = 100000);

std::string corpus_digest(const std::vector<std::string>& corpus);

// One `<stem>.safetensors` file per layer: an F64 "second_moment" tensor, with
// layer, counts, corpus digest and a matrix checksum in the header metadata.
std::filesystem::path save_covariance(const CovarianceStats& stats, const std::filesystem::path& dir);
CovarianceStats load_covariance(const std::filesystem::path& path);
std::string covariance_file_stem(int layer);

// SHA-256 of the matrix blob; identifies a covariance in edit receipts.
std::string covariance_digest(const CovarianceStats& stats);

}  // namespace rocr
