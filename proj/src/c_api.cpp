// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/xtal2dos.h"

#include <cstring>
#include <exception>
#include <memory>
#include <new>
#include <string>

#include "json.hpp"
#include "xtal2dos/bench.hpp"
#include "xtal2dos/error.hpp"
#include "xtal2dos/training.hpp"

struct x2d_dataset {
  xtal2dos::Dataset data;
};

struct x2d_trainer {
  std::unique_ptr<xtal2dos::Trainer> trainer;
};

namespace {

using namespace xtal2dos;

thread_local std::string g_last_error;

x2d_status fail(x2d_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename Fn>
x2d_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return X2D_OK;
  } catch (const Error& e) {
    return fail(static_cast<x2d_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(X2D_ERR_FORMAT, e.what());
  } catch (const std::bad_alloc&) {
    return fail(X2D_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(X2D_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(X2D_ERR_INTERNAL, "unknown exception");
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw InvalidArgumentError(std::string(what) + " must not be null");
}

TrainConfig parse_config(const char* json) {
  return json == nullptr ? TrainConfig{} : TrainConfig::from_json(json);
}

std::vector<std::size_t> split_indices(const Dataset& data, x2d_split split) {
  if (split == X2D_SPLIT_ALL) return data.all_indices();
  if (split < X2D_SPLIT_TRAIN || split > X2D_SPLIT_TEST) throw InvalidArgumentError("unknown split value");
  if (data.splits.size() != data.size()) throw ValidationError("dataset has no split assignment");
  return data.indices(static_cast<Split>(split));
}

}  // namespace

extern "C" {

const char* x2d_version(void) { return "0.1.0"; }

const char* x2d_last_error(void) { return g_last_error.c_str(); }

const char* x2d_status_name(x2d_status status) {
  switch (status) {
    case X2D_OK: return "ok";
    case X2D_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case X2D_ERR_DIMENSION: return "dimension";
    case X2D_ERR_DOMAIN: return "domain";
    case X2D_ERR_VALIDATION: return "validation";
    case X2D_ERR_CONFIG: return "config";
    case X2D_ERR_IO: return "io";
    case X2D_ERR_FORMAT: return "format";
    case X2D_ERR_NUMERIC: return "numeric";
    case X2D_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void x2d_string_free(char* s) { std::free(s); }

x2d_status x2d_set_threads(int threads, int* effective) {
  return guarded([&] {
    const int n = set_thread_count(threads);
    if (effective) *effective = n;
  });
}

x2d_status x2d_split_parse(const char* name, x2d_split* out) {
  return guarded([&] {
    require(name, "name");
    require(out, "out");
    const std::string s = name;
    if (s == "train") *out = X2D_SPLIT_TRAIN;
    else if (s == "val") *out = X2D_SPLIT_VAL;
    else if (s == "test") *out = X2D_SPLIT_TEST;
    else if (s == "all") *out = X2D_SPLIT_ALL;
    else throw InvalidArgumentError("unknown split '" + s + "' (expected train, val, test or all)");
  });
}

x2d_status x2d_config_default(char** json_out) {
  return guarded([&] {
    require(json_out, "json_out");
    *json_out = copy_string(TrainConfig{}.to_json());
  });
}

x2d_status x2d_config_merge(const char* base_json, const char* override_json, char** json_out) {
  return guarded([&] {
    require(json_out, "json_out");
    TrainConfig c = parse_config(base_json);
    if (override_json != nullptr) c = TrainConfig::from_json(override_json, c);
    *json_out = copy_string(c.to_json());
  });
}

x2d_status x2d_config_validate(const char* json) {
  return guarded([&] {
    require(json, "json");
    TrainConfig::from_json(json).validate();
  });
}

x2d_status x2d_dataset_generate(size_t count, uint64_t seed, size_t l_y, x2d_dataset** out) {
  return guarded([&] {
    require(out, "out");
    SyntheticOptions options;
    options.count = count;
    options.seed = seed;
    options.l_y = l_y;
    auto handle = std::make_unique<x2d_dataset>();
    handle->data = generate_synthetic(options);
    *out = handle.release();
  });
}

x2d_status x2d_dataset_load(const char* path, const char* config_json, x2d_dataset** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    const TrainConfig c = parse_config(config_json);
    auto handle = std::make_unique<x2d_dataset>();
    handle->data = load_dataset(path, c.l_y, c.limits(), parse_grid_kind(c.grid));
    assign_splits(handle->data, c.split_ratios(), c.seed);
    *out = handle.release();
  });
}

x2d_status x2d_dataset_save(const x2d_dataset* dataset, const char* path) {
  return guarded([&] {
    require(dataset, "dataset");
    require(path, "path");
    save_dataset(dataset->data, path);
  });
}

x2d_status x2d_dataset_size(const x2d_dataset* dataset, x2d_split split, size_t* out) {
  return guarded([&] {
    require(dataset, "dataset");
    require(out, "out");
    *out = split_indices(dataset->data, split).size();
  });
}

void x2d_dataset_free(x2d_dataset* dataset) { delete dataset; }

x2d_status x2d_trainer_create(const char* config_json, x2d_trainer** out) {
  return guarded([&] {
    require(out, "out");
    auto handle = std::make_unique<x2d_trainer>();
    handle->trainer = std::make_unique<Trainer>(parse_config(config_json));
    *out = handle.release();
  });
}

x2d_status x2d_trainer_load(const char* path, x2d_trainer** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto handle = std::make_unique<x2d_trainer>();
    handle->trainer = Trainer::load(path);
    *out = handle.release();
  });
}

x2d_status x2d_trainer_save(const x2d_trainer* trainer, const char* path) {
  return guarded([&] {
    require(trainer, "trainer");
    require(path, "path");
    trainer->trainer->save(path);
  });
}

void x2d_trainer_free(x2d_trainer* trainer) { delete trainer; }

x2d_status x2d_trainer_config(const x2d_trainer* trainer, char** json_out) {
  return guarded([&] {
    require(trainer, "trainer");
    require(json_out, "json_out");
    *json_out = copy_string(trainer->trainer->config().to_json());
  });
}

x2d_status x2d_trainer_epoch(const x2d_trainer* trainer, size_t* out) {
  return guarded([&] {
    require(trainer, "trainer");
    require(out, "out");
    *out = trainer->trainer->epoch();
  });
}

x2d_status x2d_trainer_set_bin_width(x2d_trainer* trainer, double bin_width) {
  return guarded([&] {
    require(trainer, "trainer");
    trainer->trainer->set_bin_width(bin_width);
  });
}

x2d_status x2d_trainer_set_epochs(x2d_trainer* trainer, size_t epochs) {
  return guarded([&] {
    require(trainer, "trainer");
    trainer->trainer->set_epochs(epochs);
  });
}

x2d_status x2d_trainer_parameter_count(const x2d_trainer* trainer, size_t* out) {
  return guarded([&] {
    require(trainer, "trainer");
    require(out, "out");
    *out = trainer->trainer->model().parameter_count();
  });
}

const char* x2d_train_log_header(void) { return kTrainLogHeader; }

x2d_status x2d_trainer_fit_epoch(x2d_trainer* trainer, const x2d_dataset* dataset, const x2d_dataset* validation,
                                 double* loss, char** log_row) {
  return guarded([&] {
    require(trainer, "trainer");
    require(dataset, "dataset");
    Trainer& t = *trainer->trainer;
    const auto train = split_indices(dataset->data, validation ? X2D_SPLIT_ALL : X2D_SPLIT_TRAIN);
    const Dataset& val_data = validation ? validation->data : dataset->data;
    const auto val = split_indices(val_data, validation ? X2D_SPLIT_ALL : X2D_SPLIT_VAL);
    const EpochStats stats = t.train_epoch(dataset->data, train);
    MetricReport report;
    if (!val.empty()) report = t.evaluate(val_data, val);
    if (loss) *loss = stats.loss;
    if (log_row) *log_row = copy_string(train_log_row(stats, val.empty() ? nullptr : &report));
  });
}

x2d_status x2d_trainer_evaluate(x2d_trainer* trainer, const x2d_dataset* dataset, x2d_split split,
                                char** report_json) {
  return guarded([&] {
    require(trainer, "trainer");
    require(dataset, "dataset");
    require(report_json, "report_json");
    const auto indices = split_indices(dataset->data, split);
    *report_json = copy_string(trainer->trainer->evaluate(dataset->data, indices).to_json());
  });
}

x2d_status x2d_trainer_predict_csv(x2d_trainer* trainer, const x2d_dataset* dataset, x2d_split split, char** csv) {
  return guarded([&] {
    require(trainer, "trainer");
    require(dataset, "dataset");
    require(csv, "csv");
    const auto indices = split_indices(dataset->data, split);
    *csv = copy_string(trainer->trainer->predict_csv(dataset->data, indices));
  });
}

x2d_status x2d_bench_run(const char* options_json, char** report_json) {
  return guarded([&] {
    require(report_json, "report_json");
    BenchOptions options;
    if (options_json != nullptr) {
      const auto j = nlohmann::json::parse(options_json);
      if (!j.is_object()) throw ConfigError("bench options must be a JSON object");
      for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        if (key == "config") options.base = TrainConfig::from_json(it->dump(), options.base);
        else if (key == "samples") options.samples = it->get<std::size_t>();
        else if (key == "warmup") options.warmup = it->get<std::size_t>();
        else if (key == "repeats") options.repeats = it->get<std::size_t>();
        else if (key == "decoders") options.kinds = it->get<std::vector<std::string>>();
        else if (key == "threads") options.threads = it->get<int>();
        else throw ConfigError("unknown bench option '" + key + "'");
      }
    }
    *report_json = copy_string(run_bench(options).to_json());
  });
}

}  // extern "C"
