#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "fixtures.hpp"
#include "rocr/covariance.hpp"
#include "rocr/forward.hpp"
#include "rocr/io.hpp"
#include "rocr/probes.hpp"
#include "test_util.hpp"

namespace rocr {
namespace {

using testing::TempDir;

// Two carrier words x and y whose embeddings become the subject's MLP input
// through uniform attention: "x w" gives key [1,0], "y w" gives [0,1].
ModelBundle carrier_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 2;
  c.d_mlp = 2;
  c.n_heads = 1;
  c.vocab_size = 3;
  c.max_seq_len = 8;
  c.norm_kind = NormKind::kNone;
  c.rope = false;
  c.activation = Activation::kRelu;
  ModelBundle b = testing::zero_model(c, Tokenizer::word({{"x", 0}, {"y", 1}, {"w", 2}}));
  b.embed << 1, 0, 0, 1, 0, 0;
  b.layers[0].wv = 2.0 * Mat::Identity(2, 2);
  b.layers[0].wo = Mat::Identity(2, 2);
  b.layers[0].fc = Mat::Identity(2, 2);
  b.layers[0].proj = Mat::Identity(2, 2);
  return b;
}

TEST(Templates, DefaultsAndValidation) {
  const auto t = ProbeTemplateSet::defaults();
  EXPECT_EQ(t.size(), 5u);
  EXPECT_EQ(t.render(0, "alpha"), "Tell me about alpha.");
  EXPECT_ROCR_ERROR(ProbeTemplateSet::from_lines({"no placeholder"}), ErrorKind::kConfig);
  EXPECT_ROCR_ERROR(ProbeTemplateSet::from_lines({"{w} and {w}"}), ErrorKind::kConfig);
  EXPECT_ROCR_ERROR(ProbeTemplateSet::from_lines({"", "# comment"}), ErrorKind::kConfig);
  EXPECT_EQ(ProbeTemplateSet::from_lines({"# c", "", "about {w}"}).size(), 1u);
}

TEST(Templates, ShippedFileMatchesDefaults) {
  EXPECT_EQ(ProbeTemplateSet::load(fixtures::root() / "templates" / "default.txt").sentences,
            ProbeTemplateSet::defaults().sentences);
}

TEST(Locate, FinalTokenOfMultiTokenSpan) {
  const Tokenizer t = Tokenizer::word({{"Stephen", 0}, {"King", 1}, {"is", 2}});
  EXPECT_EQ(locate_subject_token(t.encode("Stephen King is"), "Stephen King", t), 1);
}

TEST(Locate, LastOccurrenceWins) {
  const Tokenizer t = Tokenizer::word({{"Stephen", 0}, {"King", 1}, {"is", 2}});
  EXPECT_EQ(locate_subject_token(t.encode("Stephen King is Stephen King is"), "Stephen King", t), 4);
}

TEST(Locate, AbsentWordIsProbeError) {
  const Tokenizer t = Tokenizer::word({{"Stephen", 0}, {"King", 1}, {"is", 2}});
  EXPECT_ROCR_ERROR(locate_subject_token(t.encode("King is"), "Stephen", t), ErrorKind::kProbe);
}

TEST(Locate, BpeSubtokens) {
  const ModelBundle b = load_model(fixtures::root() / "toy2g");
  const auto ids = b.tokenizer.encode("I read about gamma yesterday.");
  const int pos = locate_subject_token(ids, "gamma", b.tokenizer);
  const auto d = b.tokenizer.decode_with_spans(ids);
  EXPECT_EQ(d.spans[pos].second, d.text.find("gamma") + 5);
}

TEST(Collect, MeanOfOneEqualsTrace) {
  const ModelBundle b = load_model(fixtures::root() / "toy2l");
  const auto one = ProbeTemplateSet::from_lines({"Tell me about {w} Q:"});
  const ForwardTrace tr = forward(b, b.tokenizer.encode("Tell me about gamma Q:"), TraceSites::all());
  const ConceptStats s = collect_activation_key(b, one, "gamma", 1);
  EXPECT_EQ(*s.k, Vec(tr.layers[1].mlp_key.row(3).transpose()));
  EXPECT_EQ(s.h, Vec(tr.layers[1].hidden.row(3).transpose()));
  EXPECT_EQ(collect_hidden_target(b, one, "gamma", 1).h, s.h);
  EXPECT_EQ(s.n_samples, 1);
}

TEST(Collect, HandBuiltKeysAverage) {
  const ModelBundle b = carrier_model();
  const auto t = ProbeTemplateSet::from_lines({"x {w}", "y {w}"});
  const ConceptStats s = collect_activation_key(b, t, "w", 0);
  EXPECT_NEAR((*s.k - Vec::Constant(2, 0.5)).norm(), 0.0, 1e-15);
  EXPECT_NEAR((*s.v - b.down_projection(0) * *s.k).norm(), 0.0, 1e-15);
}

TEST(Collect, ZeroKeyIsProbeError) {
  ModelBundle b = carrier_model();
  b.layers[0].fc.setZero();
  EXPECT_ROCR_ERROR(collect_activation_key(b, ProbeTemplateSet::from_lines({"x {w}"}), "w", 0), ErrorKind::kProbe);
}

TEST(Collect, MissingWordIsProbeError) {
  const ModelBundle b = load_model(fixtures::root() / "toy2l");
  EXPECT_ROCR_ERROR(collect_activation_key(b, ProbeTemplateSet::defaults(), "zebra", 0), ErrorKind::kProbe);
  EXPECT_ROCR_ERROR(collect_activation_key(b, ProbeTemplateSet::defaults(), "alpha", 5), ErrorKind::kIndex);
}

TEST(Collect, MatchesIndependentTraceAverage) {
  for (const char* name : {"toy2l", "toy2g"}) {
    const ModelBundle b = load_model(fixtures::root() / name);
    const auto t = ProbeTemplateSet::defaults();
    for (int l = 0; l < b.n_layers(); ++l) {
      Vec k = Vec::Zero(b.config.d_mlp), h = Vec::Zero(b.config.d_model);
      for (std::size_t j = 0; j < t.size(); ++j) {
        const std::string text = b.apply_template(t.render(j, "alpha"));
        const auto ids = b.tokenizer.encode(text);
        // Subject position from the text itself: last token ending at or after the word's end.
        const auto d = b.tokenizer.decode_with_spans(ids);
        const std::size_t end = d.text.rfind("alpha") + 5;
        Eigen::Index pos = 0;
        while (d.spans[pos].second < end) ++pos;
        const ForwardTrace tr = forward(b, ids, TraceSites::all());
        k += tr.layers[l].mlp_key.row(pos).transpose();
        h += tr.layers[l].hidden.row(pos).transpose();
      }
      k /= static_cast<double>(t.size());
      h /= static_cast<double>(t.size());
      const ConceptStats s = collect_activation_key(b, t, "alpha", l);
      EXPECT_LE((*s.k - k).norm(), 1e-9 * (1.0 + k.norm())) << name << " layer " << l;
      EXPECT_LE((s.h - h).norm(), 1e-9 * (1.0 + h.norm()));
      EXPECT_LE((collect_hidden_target(b, t, "alpha", l).h - s.h).norm(), 0.0);
      EXPECT_EQ(s.n_samples, 5);
    }
  }
}

TEST(Collect, TemplateUnionIsWeightedMean) {
  const ModelBundle b = load_model(fixtures::root() / "toy2g");
  const auto all = ProbeTemplateSet::defaults();
  const auto t1 = ProbeTemplateSet::from_lines({all.sentences[0], all.sentences[1]});
  const auto t2 = ProbeTemplateSet::from_lines({all.sentences[2], all.sentences[3], all.sentences[4]});
  const ConceptStats u = collect_activation_key(b, all, "beta", 1);
  const ConceptStats a = collect_activation_key(b, t1, "beta", 1);
  const ConceptStats c = collect_activation_key(b, t2, "beta", 1);
  EXPECT_LE((*u.k - (2.0 * *a.k + 3.0 * *c.k) / 5.0).norm(), 1e-9);
  EXPECT_LE((u.h - (2.0 * a.h + 3.0 * c.h) / 5.0).norm(), 1e-9);
}

TEST(Collect, TemplateFlagControlsChatTemplate) {
  const ModelBundle b = load_model(fixtures::root() / "toy2g");
  const auto t = ProbeTemplateSet::defaults();
  EXPECT_GT((collect_activation_key(b, t, "alpha", 0, true).h - collect_activation_key(b, t, "alpha", 0, false).h)
                .norm(),
            1e-6);
}

TEST(Covariance, TwoUnitKeysGiveIdentity) {
  CovarianceStats s = CovarianceStats::zeros(0, 2);
  s.add_key(Vec::Unit(2, 0));
  s.add_key(Vec::Unit(2, 1));
  EXPECT_EQ(s.second_moment, Mat::Identity(2, 2));
  EXPECT_EQ(s.n_keys, 2);
}

TEST(Covariance, EmptyCorpusIsEmptyCovariance) {
  const ModelBundle b = load_model(fixtures::root() / "toy2l");
  EXPECT_ROCR_ERROR(accumulate_covariance(b, {}, 0), ErrorKind::kEmptyCovariance);
  EXPECT_ROCR_ERROR(accumulate_covariance(b, {"", "   "}, 0), ErrorKind::kEmptyCovariance);
  EXPECT_ROCR_ERROR(accumulate_covariance(b, fixtures::toy_corpus(), 0, 0), ErrorKind::kEmptyCovariance);
}

TEST(Covariance, SplitAndMergeEqualsOnePass) {
  const ModelBundle b = load_model(fixtures::root() / "toy2g");
  const auto corpus = fixtures::toy_corpus();
  const std::vector<std::string> first(corpus.begin(), corpus.begin() + 9), second(corpus.begin() + 9, corpus.end());
  const CovarianceStats all = accumulate_covariance(b, corpus, 1);
  CovarianceStats a = accumulate_covariance(b, first, 1);
  const CovarianceStats c = accumulate_covariance(b, second, 1);
  CovarianceStats ca = c;
  a.merge(c);
  ca.merge(accumulate_covariance(b, first, 1));
  EXPECT_EQ(a.n_keys, all.n_keys);
  EXPECT_LE((a.second_moment - all.second_moment).norm(), 1e-9 * all.second_moment.norm());
  EXPECT_LE((ca.second_moment - a.second_moment).norm(), 1e-9 * all.second_moment.norm());
}

TEST(Covariance, SymmetricPositiveSemidefinite) {
  for (const char* name : {"toy2l", "toy2g", "planted"}) {
    const ModelBundle b = load_model(fixtures::root() / name);
    for (const auto& s : accumulate_covariances(b, fixtures::toy_corpus(), {0, 1})) {
      EXPECT_LE((s.second_moment - s.second_moment.transpose()).cwiseAbs().maxCoeff(), 1e-12);
      const Vec ev = Eigen::SelfAdjointEigenSolver<Mat>(s.second_moment).eigenvalues();
      EXPECT_GE(ev.minCoeff(), -1e-9 * ev.maxCoeff());
    }
  }
}

TEST(Covariance, KeysAreReproducibleFromTraces) {
  const ModelBundle b = load_model(fixtures::root() / "toy2l");
  const auto corpus = fixtures::toy_corpus();
  CovarianceStats manual = CovarianceStats::zeros(1, b.config.d_mlp);
  std::int64_t skipped = 0;
  for (const auto& line : corpus) {
    if (line.empty()) continue;
    std::vector<TokenId> ids;
    try {
      ids = b.tokenizer.encode(line);
    } catch (const Error&) {
      ++skipped;
      continue;
    }
    const ForwardTrace t = forward(b, ids, TraceSite::kMlpKey);
    for (Eigen::Index i = 0; i < t.layers[1].mlp_key.rows(); ++i) manual.add_key(t.layers[1].mlp_key.row(i).transpose());
  }
  const CovarianceStats s = accumulate_covariance(b, corpus, 1);
  EXPECT_EQ(s.n_keys, manual.n_keys);
  EXPECT_EQ(s.skipped_lines, skipped);
  EXPECT_EQ(skipped, 1);
  EXPECT_LE((s.second_moment - manual.second_moment).norm(), 1e-9 * manual.second_moment.norm());
}

TEST(Covariance, MaxKeysTakesLeadingPositions) {
  const ModelBundle b = load_model(fixtures::root() / "toy2l");
  const auto corpus = fixtures::toy_corpus();
  const auto ids = b.tokenizer.encode(corpus[0]);
  const CovarianceStats s = accumulate_covariance(b, corpus, 0, 3);
  EXPECT_EQ(s.n_keys, 3);
  const Mat keys = forward(b, ids, TraceSite::kMlpKey).layers[0].mlp_key.topRows(3);
  EXPECT_LE((s.second_moment - keys.transpose() * keys).norm(), 1e-12);
}

TEST(Covariance, LongLinesAreWindowed) {
  const ModelBundle b = load_model(fixtures::root() / "toy2l");
  std::string line;
  for (int i = 0; i < 150; ++i) line += "the ";
  EXPECT_EQ(accumulate_covariance(b, {line}, 0).n_keys, 150);
}

TEST(Covariance, ThreadCountDoesNotChangeResult) {
  const ModelBundle b = load_model(fixtures::root() / "toy2g");
  std::vector<std::string> corpus;
  for (int r = 0; r < 4; ++r)
    for (const auto& l : fixtures::toy_corpus()) corpus.push_back(l);
  CovarianceOptions one, four;
  four.threads = 4;
  const auto a = accumulate_covariances(b, corpus, {0, 1}, one);
  const auto c = accumulate_covariances(b, corpus, {0, 1}, four);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].second_moment, c[i].second_moment);
    EXPECT_EQ(a[i].n_keys, c[i].n_keys);
  }
}

TEST(Covariance, FileRoundTripIsBitExact) {
  TempDir tmp;
  const ModelBundle b = load_model(fixtures::root() / "toy2g");
  const CovarianceStats s = accumulate_covariance(b, fixtures::toy_corpus(), 1);
  const auto path = save_covariance(s, tmp.path());
  EXPECT_EQ(path.filename(), "cov_layer1.safetensors");
  const CovarianceStats back = load_covariance(path);
  EXPECT_EQ(back.second_moment, s.second_moment);
  EXPECT_EQ(back.n_keys, s.n_keys);
  EXPECT_EQ(back.layer, 1);
  EXPECT_EQ(back.corpus_digest, corpus_digest(fixtures::toy_corpus()));
  EXPECT_EQ(covariance_digest(back), covariance_digest(s));
}

TEST(Covariance, TamperedBlobIsRejected) {
  TempDir tmp;
  const ModelBundle b = load_model(fixtures::root() / "toy2l");
  const auto path = save_covariance(accumulate_covariance(b, fixtures::toy_corpus(), 0), tmp.path());
  auto bytes = read_binary_file(path);
  bytes[bytes.size() - 20] ^= 0x40;
  write_binary_file(path, bytes);
  EXPECT_ROCR_ERROR(load_covariance(path), ErrorKind::kCorruption);
  bytes.resize(bytes.size() - 8);
  write_binary_file(path, bytes);
  EXPECT_ROCR_ERROR(load_covariance(path), ErrorKind::kCorruption);
}

}  // namespace
}  // namespace rocr
