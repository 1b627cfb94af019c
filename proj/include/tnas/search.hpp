#pragma once

/// @file search.hpp
/// Elitist evolutionary architecture search with a recall-based fitness, plus
/// the random-search and random-sampling baselines.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tnas/data.hpp"
#include "tnas/genome.hpp"
#include "tnas/metrics.hpp"
#include "tnas/supernet.hpp"
#include "tnas/train.hpp"
#include "tnas/ttfs.hpp"

namespace tnas {

enum class Domain { Ann, Snn };

inline std::string domain_name(Domain d) { return d == Domain::Ann ? "ann" : "snn"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "ann") return Domain::Ann;
  if (s == "snn") return Domain::Snn;
  throw ConfigError("unknown domain '" + s + "' (expected ann or snn)");
}

struct Candidate {
  Genome genome;
  RecallScores scores;

  double fitness() const { return scores.fitness; }
};

/// Fitness order: higher first, ties broken by the canonical genome string.
inline bool better(const Candidate& a, const Candidate& b) {
  if (a.fitness() != b.fitness()) return a.fitness() > b.fitness();
  return a.genome.str() < b.genome.str();
}

/// Held-out scores of one genome using weights inherited from the supernet.
/// In the SNN domain the subnet is fused, mapped and calibrated on the
/// calibration split before spiking inference.
inline RecallScores evaluate_fitness(const Genome& genome, const Supernet& supernet, const Dataset& ds, Domain domain,
                                     const ttfs::CalibrationOptions& calib = {},
                                     const std::string& split = "eval") {
  if (ds.count(split) == 0) throw ConfigError("evaluate_fitness: split '" + split + "' is empty");
  if (domain == Domain::Ann) return score(evaluate_ann(build_subnet(supernet, genome, false), ds, split));
  const auto snn = ttfs::map_ann_to_snn(build_subnet(supernet, genome, true), split_inputs(ds, "calib"), calib);
  return score(evaluate_snn(snn, ds, split).confusion);
}

using FitnessFn = std::function<RecallScores(const Genome&)>;

/// Memoizes a fitness function by canonical genome string.
class FitnessCache {
 public:
  explicit FitnessCache(FitnessFn fn) : fn_(std::move(fn)) {}

  const RecallScores& operator()(const Genome& g) {
    const auto key = g.str();
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, fn_(g)).first;
    return it->second;
  }
  bool contains(const Genome& g) const { return cache_.count(g.str()) != 0; }
  std::size_t evaluations() const { return cache_.size(); }
  const std::map<std::string, RecallScores>& entries() const { return cache_; }

 private:
  FitnessFn fn_;
  std::map<std::string, RecallScores> cache_;
};

struct SearchOptions {
  std::size_t rounds = 18;
  std::size_t n_eval = 12;
  std::size_t n_top = 12;
  double p_mut = 0.1;
  std::uint64_t seed = 0;
  std::size_t max_retries = 32;  // resampling budget for duplicate children
};

struct SearchLogRow {
  std::size_t round;
  Candidate candidate;
};

struct SearchState {
  std::size_t round = 0;
  std::vector<Candidate> p_eval;
  std::vector<Candidate> p_top;  // sorted by `better`
  std::vector<double> history;   // best elite fitness after each round (index 0: initial pool)
  std::vector<Genome> best_genomes;
  std::vector<SearchLogRow> log;
};

/// Uniform crossover of two parents followed by per-gene mutation to a
/// different choice with probability p_mut.
inline Genome make_child(const Genome& a, const Genome& b, double p_mut, Rng& rng) {
  if (a.size() != b.size()) throw ConfigError("make_child: parents differ in length");
  std::bernoulli_distribution coin(0.5), mutate(p_mut);
  std::uniform_int_distribution<int> other(1, 2);
  Genome child = a;
  for (std::size_t i = 0; i < child.size(); ++i) {
    if (coin(rng)) child.choices[i] = b.choices[i];
    if (mutate(rng)) {
      const int cur = static_cast<int>(child.choices[i]);
      child.choices[i] = kAllChoices[static_cast<std::size_t>((cur + other(rng)) % 3)];
    }
  }
  return child;
}

namespace detail {

inline void merge_elites(SearchState& s, std::size_t n_top) {
  std::vector<Candidate> pool = s.p_top;
  pool.insert(pool.end(), s.p_eval.begin(), s.p_eval.end());
  std::sort(pool.begin(), pool.end(), better);
  std::vector<Candidate> top;
  std::set<std::string> seen;
  for (const auto& c : pool) {
    if (top.size() == n_top) break;
    if (seen.insert(c.genome.str()).second) top.push_back(c);
  }
  s.p_top = std::move(top);
  s.history.push_back(s.p_top.front().fitness());
  s.best_genomes.push_back(s.p_top.front().genome);
}

inline void record(SearchState& s, FitnessCache& fitness) {
  for (auto& c : s.p_eval) {
    c.scores = fitness(c.genome);
    s.log.push_back({s.round, c});
  }
}

inline std::size_t space_size(std::size_t blocks) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < blocks && n < (std::size_t{1} << 40); ++i) n *= 3;
  return n;
}

}  // namespace detail

/// Initial pool of n_eval distinct uniform samples, evaluated.
inline SearchState init_search(std::size_t blocks, FitnessCache& fitness, const SearchOptions& opt, Rng& rng) {
  if (opt.n_eval == 0 || opt.n_top == 0) throw ConfigError("search: N_eval and N_top must be positive");
  SearchState s;
  std::set<std::string> seen;
  const std::size_t want = std::min(opt.n_eval, detail::space_size(blocks));
  while (s.p_eval.size() < want) {
    auto g = sample_uniform_genome(blocks, rng);
    if (seen.insert(g.str()).second) s.p_eval.push_back({g, {}});
  }
  detail::record(s, fitness);
  detail::merge_elites(s, opt.n_top);
  return s;
}

/// One generation: children from pairs of distinct elites, duplicate
/// children resampled a bounded number of times, then elitist merge.
inline void evolve_round(SearchState& s, FitnessCache& fitness, const SearchOptions& opt, Rng& rng) {
  ++s.round;
  s.p_eval.clear();
  std::set<std::string> batch;
  std::uniform_int_distribution<std::size_t> pick(0, s.p_top.size() - 1);
  for (std::size_t i = 0; i < opt.n_eval; ++i) {
    Genome child;
    for (std::size_t attempt = 0; attempt <= opt.max_retries; ++attempt) {
      const std::size_t a = pick(rng);
      std::size_t b = a;
      if (s.p_top.size() > 1) {
        while (b == a) b = pick(rng);
      }
      child = make_child(s.p_top[a].genome, s.p_top[b].genome, opt.p_mut, rng);
      if (!fitness.contains(child) && !batch.count(child.str())) break;
    }
    batch.insert(child.str());
    s.p_eval.push_back({child, {}});
  }
  detail::record(s, fitness);
  detail::merge_elites(s, opt.n_top);
}

struct SearchResult {
  Candidate best;
  SearchState state;
  std::size_t distinct_evaluations = 0;
};

inline SearchResult run_search(std::size_t blocks, const FitnessFn& fn, const SearchOptions& opt) {
  FitnessCache fitness(fn);
  Rng rng(opt.seed);
  auto state = init_search(blocks, fitness, opt, rng);
  for (std::size_t r = 0; r < opt.rounds; ++r) evolve_round(state, fitness, opt, rng);
  return {state.p_top.front(), std::move(state), fitness.evaluations()};
}

inline SearchResult run_search(const Supernet& supernet, const Dataset& ds, Domain domain, const SearchOptions& opt,
                               const ttfs::CalibrationOptions& calib = {}) {
  return run_search(supernet.config.searchable_blocks(),
                    [&](const Genome& g) { return evaluate_fitness(g, supernet, ds, domain, calib); }, opt);
}

// ---------------------------------------------------------------- baselines

/// n distinct uniform genomes (capped at the size of the space).
inline std::vector<Genome> sample_distinct_genomes(std::size_t blocks, std::size_t n, Rng& rng) {
  n = std::min(n, detail::space_size(blocks));
  std::vector<Genome> out;
  std::set<std::string> seen;
  while (out.size() < n) {
    auto g = sample_uniform_genome(blocks, rng);
    if (seen.insert(g.str()).second) out.push_back(std::move(g));
  }
  return out;
}

struct RandomSearchResult {
  Candidate best;
  std::vector<Candidate> sampled;
};

inline RandomSearchResult baseline_random_search(std::size_t blocks, const FitnessFn& fn, std::size_t n, Rng& rng) {
  if (n == 0) throw ConfigError("random search needs at least one sample");
  RandomSearchResult r;
  for (auto& g : sample_distinct_genomes(blocks, n, rng)) r.sampled.push_back({g, fn(g)});
  r.best = *std::min_element(r.sampled.begin(), r.sampled.end(), better);
  return r;
}

struct RandomSamplingResult {
  std::vector<Candidate> runs;  // scores of each architecture trained from scratch
  double mean_war = 0.0;
  double mean_uar = 0.0;
};

/// k architectures trained independently; `train_and_score` owns the budget.
inline RandomSamplingResult baseline_random_sampling(std::size_t blocks, std::size_t k, const FitnessFn& train_and_score,
                                                     Rng& rng) {
  if (k == 0) throw ConfigError("random sampling needs at least one architecture");
  RandomSamplingResult r;
  for (auto& g : sample_distinct_genomes(blocks, k, rng)) {
    r.runs.push_back({g, train_and_score(g)});
    r.mean_war += r.runs.back().scores.war;
    r.mean_uar += r.runs.back().scores.uar;
  }
  r.mean_war /= static_cast<double>(r.runs.size());
  r.mean_uar /= static_cast<double>(r.runs.size());
  return r;
}

}  // namespace tnas
