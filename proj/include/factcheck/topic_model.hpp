#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "factcheck/tensor.hpp"

// Latent Dirichlet allocation by collapsed Gibbs sampling. Each sentence of
// the corpus (claim or evidence) is treated as one document. A fitted model
// provides per-sentence topic proportion vectors and the global topic-word
// matrix consumed downstream.

namespace factcheck {

struct VocabPolicy {
  int min_df = 2;             // drop tokens in fewer documents
  double max_df_ratio = 0.5;  // drop tokens in more than this share of docs
};

class Vocab {
 public:
  Vocab() = default;

  // Builds a frequency-banded vocabulary from tokenized documents.
  static Vocab build(const std::vector<std::vector<std::string>>& docs,
                     const VocabPolicy& policy = {});

  int id(const std::string& token) const;  // -1 when out of vocabulary
  const std::string& token(int id) const { return tokens_[static_cast<std::size_t>(id)]; }
  int size() const { return static_cast<int>(tokens_.size()); }
  int doc_frequency(int id) const { return doc_freq_[static_cast<std::size_t>(id)]; }

  // Maps tokens to ids, silently dropping out-of-vocabulary tokens.
  std::vector<int> encode(const std::vector<std::string>& tokens) const;

  void add_token(const std::string& token, int df);  // used by model loading

 private:
  std::vector<std::string> tokens_;
  std::vector<int> doc_freq_;
  std::unordered_map<std::string, int> index_;
};

// Tokenize + vocabulary lookup; the id list may be empty.
std::vector<int> preprocess(const std::string& text, const Vocab& vocab);

struct TopicModelConfig {
  int K = 25;
  double alpha = -1.0;  // <= 0 means the 50/K heuristic
  double beta = 0.01;
  int iterations = 200;
  std::uint64_t seed = 1;
};

class TopicModel {
 public:
  // Collapsed Gibbs sampling with the standard conditional
  // p(z=k) ~ (n_dk + alpha) * (n_kw + beta) / (n_k + V*beta).
  // Deterministic for a fixed seed. Documents are token-id lists; empty
  // documents are allowed and simply contribute nothing.
  static TopicModel fit(const std::vector<std::vector<int>>& docs, int vocab_size,
                        const TopicModelConfig& config);

  // Fold-in Gibbs sampling with global counts frozen; returns smoothed
  // doc-topic proportions averaged over the last `average_last` sweeps.
  // An empty sentence yields the uniform vector.
  std::vector<double> infer(const std::vector<int>& tokens, std::uint64_t seed,
                            int sweeps = 50, int average_last = 10) const;

  // The topic-word matrix as a K x V constant (non-trainable) tensor.
  ad::Tensor topic_word_matrix() const;

  int K() const { return K_; }
  int V() const { return V_; }
  double alpha() const { return alpha_; }
  double beta() const { return beta_; }
  std::uint64_t seed() const { return seed_; }
  double topic_word(int k, int w) const {
    return p_[static_cast<std::size_t>(k) * V_ + w];
  }

  // Fitted-state accessors (empty for models loaded from disk).
  const std::vector<std::vector<int>>& assignments() const { return assignments_; }
  bool has_counts() const { return !topic_word_counts_.empty(); }
  // True when the count matrices match a from-scratch recount of assignments.
  bool counts_consistent(const std::vector<std::vector<int>>& docs) const;

  // Model file: versioned header (K, V, alpha, beta, seed) + vocabulary with
  // document frequencies + row-major P. See README for the exact layout.
  void save(const std::string& path, const Vocab& vocab) const;
  static std::pair<TopicModel, Vocab> load(const std::string& path);

 private:
  int K_ = 0;
  int V_ = 0;
  double alpha_ = 0.0;
  double beta_ = 0.0;
  std::uint64_t seed_ = 0;
  std::vector<double> p_;  // K x V, rows normalized

  // Present only on fitted models.
  std::vector<std::vector<int>> assignments_;
  std::vector<int> topic_word_counts_;  // K x V
  std::vector<int> topic_counts_;       // K
  std::vector<std::vector<int>> doc_topic_counts_;
};

}  // namespace factcheck
