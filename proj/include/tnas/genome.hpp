#pragma once

/// @file genome.hpp
/// Architecture encoding: one categorical choice per searchable block.
/// Canonical text form is "c1,c2,...,cn" with tokens 3, 5 and S.

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tnas/error.hpp"
#include "tnas/tensor.hpp"

namespace tnas {

enum class BlockChoice : std::uint8_t { Conv3 = 0, Conv5 = 1, Skip = 2 };

inline constexpr std::array<BlockChoice, 3> kAllChoices{BlockChoice::Conv3, BlockChoice::Conv5,
                                                        BlockChoice::Skip};

inline char choice_token(BlockChoice c) {
  switch (c) {
    case BlockChoice::Conv3: return '3';
    case BlockChoice::Conv5: return '5';
    case BlockChoice::Skip: return 'S';
  }
  return '?';
}

inline std::size_t choice_kernel(BlockChoice c) {
  return c == BlockChoice::Conv3 ? 3 : c == BlockChoice::Conv5 ? 5 : 0;
}

struct Genome {
  std::vector<BlockChoice> choices;

  std::size_t size() const noexcept { return choices.size(); }

  std::string str() const {
    std::string s;
    for (std::size_t i = 0; i < choices.size(); ++i) {
      if (i) s += ',';
      s += choice_token(choices[i]);
    }
    return s;
  }

  static Genome parse(std::string_view text) {
    Genome g;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      auto comma = text.find(',', pos);
      if (comma == std::string_view::npos) comma = text.size();
      auto tok = text.substr(pos, comma - pos);
      while (!tok.empty() && (tok.front() == ' ' || tok.front() == '\t')) tok.remove_prefix(1);
      while (!tok.empty() && (tok.back() == ' ' || tok.back() == '\t' || tok.back() == '\n' ||
                              tok.back() == '\r')) {
        tok.remove_suffix(1);
      }
      if (tok == "3") {
        g.choices.push_back(BlockChoice::Conv3);
      } else if (tok == "5") {
        g.choices.push_back(BlockChoice::Conv5);
      } else if (tok == "S" || tok == "s") {
        g.choices.push_back(BlockChoice::Skip);
      } else {
        throw ConfigError("invalid genome token '" + std::string(tok) + "' in \"" + std::string(text) +
                          "\" (expected 3, 5 or S)");
      }
      pos = comma + 1;
    }
    if (g.choices.empty()) throw ConfigError("empty genome");
    return g;
  }

  static Genome uniform(std::size_t blocks, BlockChoice c) {
    return Genome{std::vector<BlockChoice>(blocks, c)};
  }

  friend bool operator==(const Genome&, const Genome&) = default;
  friend auto operator<=>(const Genome& a, const Genome& b) { return a.str() <=> b.str(); }
};

/// Each block choice i.i.d. uniform over {Conv3, Conv5, Skip}.
inline Genome sample_uniform_genome(std::size_t blocks, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, 2);
  Genome g;
  g.choices.reserve(blocks);
  for (std::size_t i = 0; i < blocks; ++i) g.choices.push_back(kAllChoices[static_cast<std::size_t>(pick(rng))]);
  return g;
}

/// All 3^blocks genomes in lexicographic choice order.
inline std::vector<Genome> enumerate_genomes(std::size_t blocks) {
  std::vector<Genome> all;
  std::size_t total = 1;
  for (std::size_t i = 0; i < blocks; ++i) total *= 3;
  all.reserve(total);
  for (std::size_t code = 0; code < total; ++code) {
    Genome g;
    g.choices.resize(blocks);
    std::size_t rest = code;
    for (std::size_t i = blocks; i-- > 0;) {
      g.choices[i] = kAllChoices[rest % 3];
      rest /= 3;
    }
    all.push_back(std::move(g));
  }
  return all;
}

}  // namespace tnas
