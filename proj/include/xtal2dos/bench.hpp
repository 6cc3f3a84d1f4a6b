// SPDX-License-Identifier: Apache-2.0
//
// Decoder speed benchmark: identical encoder, data, batch size and width,
// only the decoder kind varies.

#pragma once

#include <string>
#include <vector>

#include "xtal2dos/training.hpp"

namespace xtal2dos {

struct BenchOptions {
  TrainConfig base;  // decoder field is overridden per entry
  std::size_t samples = 64;
  std::size_t warmup = 1;
  std::size_t repeats = 5;
  std::vector<std::string> kinds = {"rnn", "rnn_attn", "chunk_rnn", "chunk_rnn_attn", "transformer"};
  int threads = 1;

  BenchOptions();
};

struct BenchEntry {
  std::string kind;
  std::vector<double> seconds;  // timed epochs only
  double median = 0.0;
  std::string config_json;
};

struct BenchReport {
  std::vector<BenchEntry> entries;
  int threads = 1;
  std::string host_json;
  /// transformer < chunk_rnn_attn < rnn_attn and transformer < rnn, when all
  /// four are present.
  bool ordering_holds = false;
  std::vector<std::string> ordering_failures;

  std::string to_json(int indent = 2) const;
  const BenchEntry* find(const std::string& kind) const;
};

double median(std::vector<double> values);
/// Sets the worker count of the dense kernels; returns the count in effect.
int set_thread_count(int threads);
/// CPU model, logical cores, compiler and OS as a JSON object.
std::string host_descriptor_json();

BenchReport run_bench(const BenchOptions& options);
/// Fills ordering_holds and ordering_failures from the medians.
void check_ordering(BenchReport& report);

}  // namespace xtal2dos
