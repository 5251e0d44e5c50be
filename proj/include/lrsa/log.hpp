#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>

// Tiny stderr logger gated by the LRSA_LOG env var: error (default), info,
// debug.

namespace lrsa::log {

enum class Level : int { kError = 0, kInfo = 1, kDebug = 2 };

inline Level level() {
  static Level lvl = [] {
    const char* env = std::getenv("LRSA_LOG");
    if (!env) return Level::kError;
    if (std::strcmp(env, "debug") == 0) return Level::kDebug;
    if (std::strcmp(env, "info") == 0) return Level::kInfo;
    return Level::kError;
  }();
  return lvl;
}

template <typename... Args>
void info(const char* fmt, Args... args) {
  if (level() >= Level::kInfo) {
    std::fprintf(stderr, "[lrsa] ");
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
  }
}

template <typename... Args>
void debug(const char* fmt, Args... args) {
  if (level() >= Level::kDebug) {
    std::fprintf(stderr, "[lrsa:debug] ");
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
  }
}

template <typename... Args>
void error(const char* fmt, Args... args) {
  std::fprintf(stderr, "[lrsa:error] ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

}  // namespace lrsa::log
