#include "factcheck/topic_model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "factcheck/rng.hpp"
#include "factcheck/text.hpp"

namespace factcheck {

namespace {

constexpr std::uint32_t kTopicModelMagic = 0x4c44414d;  // "LDAM"
constexpr std::uint32_t kTopicModelVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("topic model file: truncated");
  return v;
}

int sample_categorical(const std::vector<double>& weights, double total,
                       Rng& rng) {
  double u = rng.uniform() * total;
  for (std::size_t k = 0; k + 1 < weights.size(); ++k) {
    u -= weights[k];
    if (u < 0.0) return static_cast<int>(k);
  }
  return static_cast<int>(weights.size()) - 1;
}

}  // namespace

Vocab Vocab::build(const std::vector<std::vector<std::string>>& docs,
                   const VocabPolicy& policy) {
  std::unordered_map<std::string, int> df;
  for (const auto& doc : docs) {
    std::unordered_map<std::string, bool> seen;
    for (const auto& tok : doc) {
      if (!seen.count(tok)) {
        seen[tok] = true;
        ++df[tok];
      }
    }
  }
  const double max_df = policy.max_df_ratio * static_cast<double>(docs.size());
  // Deterministic order: by descending df, then lexicographic.
  std::vector<std::pair<std::string, int>> kept;
  for (const auto& [tok, count] : df) {
    if (count < policy.min_df) continue;
    if (static_cast<double>(count) > max_df) continue;
    kept.emplace_back(tok, count);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab v;
  for (const auto& [tok, count] : kept) v.add_token(tok, count);
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? -1 : it->second;
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& tok : tokens) {
    const int i = id(tok);
    if (i >= 0) ids.push_back(i);
  }
  return ids;
}

void Vocab::add_token(const std::string& token, int df) {
  index_[token] = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  doc_freq_.push_back(df);
}

std::vector<int> preprocess(const std::string& text, const Vocab& vocab) {
  return vocab.encode(tokenize_words(text));
}

TopicModel TopicModel::fit(const std::vector<std::vector<int>>& docs,
                           int vocab_size, const TopicModelConfig& config) {
  if (config.K < 2) throw std::invalid_argument("lda: K must be at least 2");
  if (config.iterations < 1) {
    throw std::invalid_argument("lda: iterations must be at least 1");
  }
  bool any_token = false;
  for (const auto& d : docs) {
    if (!d.empty()) any_token = true;
  }
  if (docs.empty() || !any_token) {
    throw std::invalid_argument("lda: corpus is empty after preprocessing");
  }

  TopicModel m;
  m.K_ = config.K;
  m.V_ = vocab_size;
  m.alpha_ = config.alpha > 0.0 ? config.alpha : 50.0 / config.K;
  m.beta_ = config.beta;
  m.seed_ = config.seed;

  const int K = m.K_, V = m.V_;
  const double alpha = m.alpha_, beta = m.beta_;
  const double v_beta = V * beta;

  m.topic_word_counts_.assign(static_cast<std::size_t>(K) * V, 0);
  m.topic_counts_.assign(static_cast<std::size_t>(K), 0);
  m.doc_topic_counts_.assign(docs.size(), std::vector<int>(static_cast<std::size_t>(K), 0));
  m.assignments_.resize(docs.size());

  Rng rng(config.seed);

  // Random initial assignment.
  for (std::size_t d = 0; d < docs.size(); ++d) {
    m.assignments_[d].resize(docs[d].size());
    for (std::size_t n = 0; n < docs[d].size(); ++n) {
      const int w = docs[d][n];
      const int k = rng.uniform_int(K);
      m.assignments_[d][n] = k;
      ++m.topic_word_counts_[static_cast<std::size_t>(k) * V + w];
      ++m.topic_counts_[static_cast<std::size_t>(k)];
      ++m.doc_topic_counts_[d][static_cast<std::size_t>(k)];
    }
  }

  std::vector<double> weights(static_cast<std::size_t>(K));
  for (int iter = 0; iter < config.iterations; ++iter) {
    for (std::size_t d = 0; d < docs.size(); ++d) {
      auto& doc_counts = m.doc_topic_counts_[d];
      for (std::size_t n = 0; n < docs[d].size(); ++n) {
        const int w = docs[d][n];
        const int old_k = m.assignments_[d][n];
        --m.topic_word_counts_[static_cast<std::size_t>(old_k) * V + w];
        --m.topic_counts_[static_cast<std::size_t>(old_k)];
        --doc_counts[static_cast<std::size_t>(old_k)];

        double total = 0.0;
        for (int k = 0; k < K; ++k) {
          const double p =
              (doc_counts[static_cast<std::size_t>(k)] + alpha) *
              (m.topic_word_counts_[static_cast<std::size_t>(k) * V + w] + beta) /
              (m.topic_counts_[static_cast<std::size_t>(k)] + v_beta);
          weights[static_cast<std::size_t>(k)] = p;
          total += p;
        }
        const int new_k = sample_categorical(weights, total, rng);

        m.assignments_[d][n] = new_k;
        ++m.topic_word_counts_[static_cast<std::size_t>(new_k) * V + w];
        ++m.topic_counts_[static_cast<std::size_t>(new_k)];
        ++doc_counts[static_cast<std::size_t>(new_k)];
      }
    }
  }

  // P read off the smoothed topic-word counts; rows sum to one exactly.
  m.p_.assign(static_cast<std::size_t>(K) * V, 0.0);
  for (int k = 0; k < K; ++k) {
    const double denom = m.topic_counts_[static_cast<std::size_t>(k)] + v_beta;
    for (int w = 0; w < V; ++w) {
      m.p_[static_cast<std::size_t>(k) * V + w] =
          (m.topic_word_counts_[static_cast<std::size_t>(k) * V + w] + beta) / denom;
    }
  }
  return m;
}

std::vector<double> TopicModel::infer(const std::vector<int>& tokens,
                                      std::uint64_t seed, int sweeps,
                                      int average_last) const {
  std::vector<double> theta(static_cast<std::size_t>(K_), 1.0 / K_);
  if (tokens.empty()) return theta;  // declared fallback: uniform

  Rng rng(seed);
  std::vector<int> z(tokens.size());
  std::vector<int> local(static_cast<std::size_t>(K_), 0);
  for (std::size_t n = 0; n < tokens.size(); ++n) {
    z[n] = rng.uniform_int(K_);
    ++local[static_cast<std::size_t>(z[n])];
  }

  const double len_term = static_cast<double>(tokens.size()) + K_ * alpha_;
  std::vector<double> weights(static_cast<std::size_t>(K_));
  std::vector<double> acc(static_cast<std::size_t>(K_), 0.0);
  int accumulated = 0;
  const int first_kept = sweeps - std::min(average_last, sweeps);
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (std::size_t n = 0; n < tokens.size(); ++n) {
      const int w = tokens[n];
      --local[static_cast<std::size_t>(z[n])];
      double total = 0.0;
      for (int k = 0; k < K_; ++k) {
        // (n_kw + beta) / (n_k + V*beta) is exactly the stored P row.
        const double p = (local[static_cast<std::size_t>(k)] + alpha_) *
                         topic_word(k, w);
        weights[static_cast<std::size_t>(k)] = p;
        total += p;
      }
      z[n] = sample_categorical(weights, total, rng);
      ++local[static_cast<std::size_t>(z[n])];
    }
    if (sweep >= first_kept) {
      for (int k = 0; k < K_; ++k) {
        acc[static_cast<std::size_t>(k)] +=
            (local[static_cast<std::size_t>(k)] + alpha_) / len_term;
      }
      ++accumulated;
    }
  }
  for (int k = 0; k < K_; ++k) {
    theta[static_cast<std::size_t>(k)] = acc[static_cast<std::size_t>(k)] / accumulated;
  }
  return theta;
}

ad::Tensor TopicModel::topic_word_matrix() const {
  return ad::Tensor::leaf({K_, V_}, p_, false);
}

bool TopicModel::counts_consistent(
    const std::vector<std::vector<int>>& docs) const {
  if (!has_counts() || docs.size() != assignments_.size()) return false;
  std::vector<int> tw(static_cast<std::size_t>(K_) * V_, 0);
  std::vector<int> tc(static_cast<std::size_t>(K_), 0);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (docs[d].size() != assignments_[d].size()) return false;
    std::vector<int> dt(static_cast<std::size_t>(K_), 0);
    for (std::size_t n = 0; n < docs[d].size(); ++n) {
      const int k = assignments_[d][n];
      ++tw[static_cast<std::size_t>(k) * V_ + docs[d][n]];
      ++tc[static_cast<std::size_t>(k)];
      ++dt[static_cast<std::size_t>(k)];
    }
    if (dt != doc_topic_counts_[d]) return false;
  }
  return tw == topic_word_counts_ && tc == topic_counts_;
}

void TopicModel::save(const std::string& path, const Vocab& vocab) const {
  if (vocab.size() != V_) {
    throw std::invalid_argument("topic model save: vocabulary size mismatch");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("topic model save: cannot open " + path);
  write_pod(os, kTopicModelMagic);
  write_pod(os, kTopicModelVersion);
  write_pod(os, static_cast<std::uint32_t>(K_));
  write_pod(os, static_cast<std::uint32_t>(V_));
  write_pod(os, alpha_);
  write_pod(os, beta_);
  write_pod(os, seed_);
  for (int i = 0; i < V_; ++i) {
    const std::string& tok = vocab.token(i);
    write_pod(os, static_cast<std::uint32_t>(tok.size()));
    os.write(tok.data(), static_cast<std::streamsize>(tok.size()));
    write_pod(os, static_cast<std::uint32_t>(vocab.doc_frequency(i)));
  }
  os.write(reinterpret_cast<const char*>(p_.data()),
           static_cast<std::streamsize>(p_.size() * sizeof(double)));
  if (!os) throw std::runtime_error("topic model save: write failed");
}

std::pair<TopicModel, Vocab> TopicModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("topic model load: cannot open " + path);
  if (read_pod<std::uint32_t>(is) != kTopicModelMagic) {
    throw std::runtime_error("topic model load: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kTopicModelVersion) {
    throw std::runtime_error("topic model load: unsupported version " +
                             std::to_string(version));
  }
  TopicModel m;
  m.K_ = static_cast<int>(read_pod<std::uint32_t>(is));
  m.V_ = static_cast<int>(read_pod<std::uint32_t>(is));
  m.alpha_ = read_pod<double>(is);
  m.beta_ = read_pod<double>(is);
  m.seed_ = read_pod<std::uint64_t>(is);
  Vocab vocab;
  for (int i = 0; i < m.V_; ++i) {
    const auto len = read_pod<std::uint32_t>(is);
    std::string tok(len, '\0');
    is.read(tok.data(), len);
    const auto df = read_pod<std::uint32_t>(is);
    vocab.add_token(tok, static_cast<int>(df));
  }
  m.p_.resize(static_cast<std::size_t>(m.K_) * m.V_);
  is.read(reinterpret_cast<char*>(m.p_.data()),
          static_cast<std::streamsize>(m.p_.size() * sizeof(double)));
  if (!is) throw std::runtime_error("topic model load: truncated " + path);
  return {std::move(m), std::move(vocab)};
}

}  // namespace factcheck
