// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/bench.hpp"

#include <sys/utsname.h>

#include <Eigen/Core>
#include <algorithm>
#include <fstream>
#include <thread>

#include "json.hpp"
#include "xtal2dos/error.hpp"
#include "xtal2dos/log.hpp"

namespace xtal2dos {

using json = nlohmann::ordered_json;

BenchOptions::BenchOptions() {
  base.l_y = 128;
  base.batch_size = 32;
}

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgumentError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

int set_thread_count(int threads) {
  if (threads < 1) throw InvalidArgumentError("thread count must be at least 1");
  Eigen::setNbThreads(threads);
  return Eigen::nbThreads();
}

std::string host_descriptor_json() {
  json j;
  std::string cpu = "unknown";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  }
  j["cpu"] = cpu;
  j["logical_cores"] = std::thread::hardware_concurrency();
  utsname u{};
  if (uname(&u) == 0) j["os"] = std::string(u.sysname) + " " + u.release + " " + u.machine;
#if defined(__clang__)
  j["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  j["compiler"] = std::string("gcc ") + __VERSION__;
#endif
  return j.dump();
}

const BenchEntry* BenchReport::find(const std::string& kind) const {
  for (const auto& e : entries) {
    if (e.kind == kind) return &e;
  }
  return nullptr;
}

void check_ordering(BenchReport& report) {
  report.ordering_failures.clear();
  const auto* tr = report.find("transformer");
  const auto* cra = report.find("chunk_rnn_attn");
  const auto* ra = report.find("rnn_attn");
  const auto* rnn = report.find("rnn");
  if (!tr || !cra || !ra || !rnn) {
    report.ordering_holds = false;
    report.ordering_failures.emplace_back("ordering needs transformer, chunk_rnn_attn, rnn_attn and rnn");
    return;
  }
  auto expect_less = [&](const BenchEntry* a, const BenchEntry* b) {
    if (!(a->median < b->median)) {
      report.ordering_failures.push_back(a->kind + " (" + std::to_string(a->median) + " s) is not faster than " +
                                         b->kind + " (" + std::to_string(b->median) + " s)");
    }
  };
  expect_less(tr, cra);
  expect_less(cra, ra);
  expect_less(tr, rnn);
  report.ordering_holds = report.ordering_failures.empty();
}

BenchReport run_bench(const BenchOptions& options) {
  if (options.repeats < 5) throw ConfigError("bench needs at least 5 timed epochs");
  if (options.samples < 2) throw ConfigError("bench needs at least 2 samples");
  BenchReport report;
  report.threads = set_thread_count(options.threads);
  report.host_json = host_descriptor_json();

  SyntheticOptions gen;
  gen.count = options.samples;
  gen.seed = options.base.seed;
  gen.l_y = options.base.l_y;
  gen.d_atom = options.base.d_atom;
  gen.n_max_nbr = options.base.n_max_nbr;
  const Dataset data = generate_synthetic(gen);
  const auto indices = data.all_indices();

  for (const auto& kind : options.kinds) {
    TrainConfig config = options.base;
    config.decoder = kind;
    Trainer trainer(config);
    BenchEntry entry;
    entry.kind = kind;
    entry.config_json = config.to_json(-1);
    for (std::size_t e = 0; e < options.warmup + options.repeats; ++e) {
      const EpochStats stats = trainer.train_epoch(data, indices);
      if (e >= options.warmup) entry.seconds.push_back(stats.seconds);
    }
    entry.median = median(entry.seconds);
    logger().info("bench {}: median {:.4f} s/epoch", kind, entry.median);
    report.entries.push_back(std::move(entry));
  }
  check_ordering(report);
  return report;
}

std::string BenchReport::to_json(int indent) const {
  json j;
  j["host"] = json::parse(host_json);
  j["threads"] = threads;
  auto list = json::array();
  for (const auto& e : entries) {
    json row;
    row["decoder"] = e.kind;
    row["median_seconds"] = e.median;
    row["epoch_seconds"] = e.seconds;
    row["config"] = json::parse(e.config_json);
    list.push_back(std::move(row));
  }
  j["decoders"] = std::move(list);
  j["ordering_holds"] = ordering_holds;
  j["ordering_failures"] = ordering_failures;
  return j.dump(indent);
}

}  // namespace xtal2dos
