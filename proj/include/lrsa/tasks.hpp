#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lrsa/errors.hpp"
#include "lrsa/rng.hpp"

// Synthetic task generators. Targets use -1 for unsupervised positions;
// training only scores positions whose target id is >= 0.

namespace lrsa::tasks {

struct TaskInstance {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;  // -1 = ignore
  std::string kind;
  i64 needle_pos = -1;
  i64 needle_len = 0;
};

// First half random, second half repeats it. Targets supervise exactly the
// second-half predictions (the first half is incompressible noise whose
// optimal loss is ln(vocab); scoring it would only add a constant floor).
inline TaskInstance gen_copy_task(Rng& rng, i64 seq_len, i64 vocab) {
  if (seq_len < 2 || seq_len % 2 != 0)
    throw ConfigError("copy task: seq_len must be even and >= 2, got " + std::to_string(seq_len));
  TaskInstance t;
  t.kind = "copy";
  const i64 half = seq_len / 2;
  t.tokens.resize(static_cast<std::size_t>(seq_len));
  for (i64 i = 0; i < half; ++i) {
    t.tokens[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(rng.uniform_int(vocab));
    t.tokens[static_cast<std::size_t>(half + i)] = t.tokens[static_cast<std::size_t>(i)];
  }
  t.targets.assign(static_cast<std::size_t>(seq_len), -1);
  for (i64 i = half - 1; i < seq_len - 1; ++i)
    t.targets[static_cast<std::size_t>(i)] = t.tokens[static_cast<std::size_t>(i + 1)];
  return t;
}

// Filler with an embedded needle from a disjoint vocab range; the final
// needle_len positions replay the needle and are the supervised queries.
inline TaskInstance gen_needle_task(Rng& rng, i64 seq_len, i64 vocab, i64 needle_len) {
  if (vocab < 4) throw ConfigError("needle task: vocab must be >= 4");
  if (needle_len < 1 || needle_len + 1 >= seq_len - needle_len)
    throw ConfigError("needle task: needle_len " + std::to_string(needle_len) +
                      " plus query does not fit in seq_len " + std::to_string(seq_len));
  TaskInstance t;
  t.kind = "needle";
  t.needle_len = needle_len;
  const i64 filler_vocab = vocab / 2;  // filler ids in [0, vocab/2)
  const i64 body = seq_len - needle_len;
  t.tokens.resize(static_cast<std::size_t>(seq_len));
  for (i64 i = 0; i < body; ++i)
    t.tokens[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(rng.uniform_int(filler_vocab));
  std::vector<std::int32_t> needle(static_cast<std::size_t>(needle_len));
  for (auto& id : needle)
    id = static_cast<std::int32_t>(filler_vocab + rng.uniform_int(vocab - filler_vocab));
  t.needle_pos = rng.uniform_int(body - needle_len);
  for (i64 i = 0; i < needle_len; ++i) {
    t.tokens[static_cast<std::size_t>(t.needle_pos + i)] = needle[static_cast<std::size_t>(i)];
    t.tokens[static_cast<std::size_t>(body + i)] = needle[static_cast<std::size_t>(i)];
  }
  t.targets.assign(static_cast<std::size_t>(seq_len), -1);
  for (i64 i = body - 1; i < seq_len - 1; ++i)
    t.targets[static_cast<std::size_t>(i)] = t.tokens[static_cast<std::size_t>(i + 1)];
  return t;
}

}  // namespace lrsa::tasks
