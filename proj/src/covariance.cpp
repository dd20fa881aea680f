#include "rocr/covariance.hpp"

#include <algorithm>
#include <cstring>
#include <future>
#include <json.hpp>

#include "rocr/error.hpp"
#include "rocr/forward.hpp"
#include "rocr/io.hpp"
#include "rocr/safetensors.hpp"

namespace rocr {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kWindowsPerChunk = 16;

struct Window {
  std::vector<TokenId> ids;
  std::int64_t take = 0;  // leading positions that enter the statistics
};

std::vector<std::uint8_t> matrix_blob(const Mat& m) {
  std::vector<std::uint8_t> blob(static_cast<std::size_t>(m.size()) * 8);
  std::size_t offset = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      std::memcpy(blob.data() + offset, &v, 8);
      offset += 8;
    }
  }
  return blob;
}

}  // namespace

CovarianceStats CovarianceStats::zeros(int layer, int d_mlp) {
  CovarianceStats s;
  s.layer = layer;
  s.second_moment = Mat::Zero(d_mlp, d_mlp);
  return s;
}

void CovarianceStats::add_key(const Vec& key) {
  second_moment.selfadjointView<Eigen::Lower>().rankUpdate(key);
  second_moment.triangularView<Eigen::StrictlyUpper>() = second_moment.transpose();
  ++n_keys;
}

void CovarianceStats::add_keys(const Mat& rows) {
  if (rows.rows() == 0) return;
  second_moment.noalias() += rows.transpose() * rows;
  // Exact symmetry regardless of the product kernel's summation order.
  second_moment.triangularView<Eigen::StrictlyUpper>() = second_moment.transpose();
  n_keys += rows.rows();
}

void CovarianceStats::merge(const CovarianceStats& other) {
  if (other.layer != layer || other.dim() != dim()) fail(ErrorKind::kShape, "covariance merge: mismatched statistics");
  second_moment += other.second_moment;
  n_keys += other.n_keys;
  skipped_lines += other.skipped_lines;
}

std::string corpus_digest(const std::vector<std::string>& corpus) {
  Sha256 h;
  for (const auto& line : corpus) {
    h.update(line);
    h.update("\n");
  }
  return h.hex();
}

std::vector<CovarianceStats> accumulate_covariances(const ModelBundle& bundle, const std::vector<std::string>& corpus,
                                                    const std::vector<int>& layers,
                                                    const CovarianceOptions& options) {
  const auto& config = bundle.config;
  if (layers.empty()) fail(ErrorKind::kConfig, "covariance: no layers requested");
  for (int l : layers) {
    if (l < 0 || l >= config.n_layers) fail(ErrorKind::kIndex, "covariance: layer " + std::to_string(l) + " out of range");
  }

  std::int64_t skipped = 0;
  std::vector<Window> windows;
  std::int64_t remaining = std::max<std::int64_t>(options.max_keys, 0);
  for (const auto& line : corpus) {
    if (remaining == 0) break;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::vector<TokenId> ids;
    try {
      ids = bundle.tokenizer.encode(line);
    } catch (const Error&) {
      ++skipped;
      continue;
    }
    for (std::size_t start = 0; start < ids.size() && remaining > 0; start += config.max_seq_len) {
      const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(config.max_seq_len));
      Window w;
      w.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(start), ids.begin() + static_cast<std::ptrdiff_t>(end));
      w.take = std::min<std::int64_t>(remaining, static_cast<std::int64_t>(w.ids.size()));
      remaining -= w.take;
      windows.push_back(std::move(w));
    }
  }

  const std::size_t n_chunks = (windows.size() + kWindowsPerChunk - 1) / kWindowsPerChunk;
  auto run_chunk = [&](std::size_t chunk) {
    std::vector<CovarianceStats> partial;
    for (int l : layers) partial.push_back(CovarianceStats::zeros(l, config.d_mlp));
    const std::size_t begin = chunk * kWindowsPerChunk;
    const std::size_t end = std::min(windows.size(), begin + kWindowsPerChunk);
    for (std::size_t i = begin; i < end; ++i) {
      const ForwardTrace trace = forward(bundle, windows[i].ids, TraceSite::kMlpKey);
      for (std::size_t li = 0; li < layers.size(); ++li) {
        partial[li].add_keys(trace.layers[layers[li]].mlp_key.topRows(windows[i].take));
      }
    }
    return partial;
  };

  std::vector<std::vector<CovarianceStats>> partials(n_chunks);
  const int threads = std::max(1, options.threads);
  for (std::size_t base = 0; base < n_chunks; base += threads) {
    std::vector<std::future<std::vector<CovarianceStats>>> jobs;
    for (std::size_t c = base; c < std::min(n_chunks, base + threads); ++c) {
      jobs.push_back(std::async(threads > 1 ? std::launch::async : std::launch::deferred, run_chunk, c));
    }
    for (std::size_t c = base; c < std::min(n_chunks, base + threads); ++c) partials[c] = jobs[c - base].get();
  }

  std::vector<CovarianceStats> out;
  const std::string digest = corpus_digest(corpus);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    CovarianceStats total = CovarianceStats::zeros(layers[li], config.d_mlp);
    for (const auto& p : partials) total.merge(p[li]);
    total.skipped_lines = skipped;
    total.corpus_digest = digest;
    if (total.n_keys == 0) {
      fail(ErrorKind::kEmptyCovariance, "covariance: no usable token positions for layer " + std::to_string(layers[li]));
    }
    out.push_back(std::move(total));
  }
  return out;
}

CovarianceStats accumulate_covariance(const ModelBundle& bundle, const std::vector<std::string>& corpus, int layer,
                                      std::int64_t max_keys) {
  CovarianceOptions options;
  options.max_keys = max_keys;
  return std::move(accumulate_covariances(bundle, corpus, {layer}, options).front());
}

std::string covariance_file_stem(int layer) { return "cov_layer" + std::to_string(layer); }

std::string covariance_digest(const CovarianceStats& stats) {
  const auto blob = matrix_blob(stats.second_moment);
  return Sha256().update(blob).hex();
}

fs::path save_covariance(const CovarianceStats& stats, const fs::path& dir) {
  fs::create_directories(dir);
  TensorMap tensors;
  Tensor& t = tensors["second_moment"];
  t.dtype = DType::kF64;
  t.shape = {stats.dim(), stats.dim()};
  t.data.assign(static_cast<std::size_t>(stats.second_moment.size()), 0.0);
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(), stats.dim(),
                                                                                     stats.dim()) = stats.second_moment;
  const std::map<std::string, std::string> meta = {{"layer", std::to_string(stats.layer)},
                                                   {"n_keys", std::to_string(stats.n_keys)},
                                                   {"corpus_digest", stats.corpus_digest},
                                                   {"skipped_lines", std::to_string(stats.skipped_lines)},
                                                   {"matrix_sha256", covariance_digest(stats)}};
  const fs::path path = dir / (covariance_file_stem(stats.layer) + ".safetensors");
  write_safetensors(path, tensors, meta);
  return path;
}

CovarianceStats load_covariance(const fs::path& path) {
  std::map<std::string, std::string> meta;
  const TensorMap tensors = read_safetensors(path, &meta);
  const auto it = tensors.find("second_moment");
  if (it == tensors.end()) fail(ErrorKind::kMissingTensor, path.string() + ": no 'second_moment' tensor");
  const Tensor& t = it->second;
  if (t.shape.size() != 2 || t.shape[0] != t.shape[1] || t.shape[0] < 1) {
    fail(ErrorKind::kShape, path.string() + ": second_moment must be a non-empty square matrix");
  }
  CovarianceStats s;
  auto field = [&](const char* key) -> const std::string& {
    const auto m = meta.find(key);
    if (m == meta.end()) fail(ErrorKind::kParse, path.string() + ": metadata key '" + key + "' missing");
    return m->second;
  };
  try {
    s.layer = std::stoi(field("layer"));
    s.n_keys = std::stoll(field("n_keys"));
    s.skipped_lines = meta.count("skipped_lines") ? std::stoll(meta.at("skipped_lines")) : 0;
  } catch (const std::logic_error& e) {
    fail(ErrorKind::kParse, path.string() + ": bad integer in metadata");
  }
  if (meta.count("corpus_digest")) s.corpus_digest = meta.at("corpus_digest");
  const auto d = static_cast<Eigen::Index>(t.shape[0]);
  s.second_moment = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data.data(), d, d);
  if (const auto m = meta.find("matrix_sha256"); m != meta.end() && m->second != covariance_digest(s)) {
    fail(ErrorKind::kCorruption, path.string() + ": covariance digest mismatch");
  }
  if (!s.second_moment.allFinite()) fail(ErrorKind::kCorruption, "covariance contains non-finite values");
  return s;
}

}  // namespace rocr
