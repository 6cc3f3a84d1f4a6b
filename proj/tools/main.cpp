// SPDX-License-Identifier: Apache-2.0
//
// xtal2dos command line: gen-data, train, eval, predict, bench.
// Links only the C interface.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "xtal2dos/xtal2dos.h"

namespace {

using json = nlohmann::ordered_json;

constexpr int kUsageExit = 64;

struct CliError {
  int status;
  std::string code;
  std::string message;
};

void emit_error(const CliError& e) {
  json j;
  j["error"] = {{"code", e.code}, {"status", e.status}, {"message", e.message}};
  std::cerr << j.dump() << std::endl;
}

void check(x2d_status status) {
  if (status != X2D_OK) throw CliError{static_cast<int>(status), x2d_status_name(status), x2d_last_error()};
}

[[noreturn]] void usage(const std::string& message) { throw CliError{kUsageExit, "usage", message}; }

struct OwnedString {
  char* ptr = nullptr;
  ~OwnedString() { x2d_string_free(ptr); }
  std::string str() const { return ptr ? std::string(ptr) : std::string(); }
};

using DatasetPtr = std::unique_ptr<x2d_dataset, decltype(&x2d_dataset_free)>;
using TrainerPtr = std::unique_ptr<x2d_trainer, decltype(&x2d_trainer_free)>;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CliError{X2D_ERR_IO, "io", "cannot open " + path};
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& text, bool append = false) {
  std::ofstream out(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  if (!out) throw CliError{X2D_ERR_IO, "io", "cannot open " + path + " for writing"};
  out << text;
  if (!out) throw CliError{X2D_ERR_IO, "io", "failed writing " + path};
}

void write_output(const std::optional<std::string>& path, const std::string& text) {
  if (path) write_file(*path, text);
  else std::cout << text;
}

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> config_path;
  int threads = 1;
};

// Defaults < --config file < flags.
std::string effective_config(const Globals& g, json overrides) {
  OwnedString base;
  if (g.config_path) {
    check(x2d_config_merge(nullptr, read_file(*g.config_path).c_str(), &base.ptr));
  } else {
    check(x2d_config_default(&base.ptr));
  }
  if (g.seed) overrides["seed"] = *g.seed;
  OwnedString merged;
  check(x2d_config_merge(base.ptr, overrides.dump().c_str(), &merged.ptr));
  return merged.str();
}

template <typename T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

DatasetPtr load_dataset(const std::string& path, const std::string& config) {
  x2d_dataset* raw = nullptr;
  check(x2d_dataset_load(path.c_str(), config.c_str(), &raw));
  return DatasetPtr(raw, x2d_dataset_free);
}

TrainerPtr load_trainer(const std::string& path) {
  x2d_trainer* raw = nullptr;
  check(x2d_trainer_load(path.c_str(), &raw));
  return TrainerPtr(raw, x2d_trainer_free);
}

x2d_split parse_split(const std::string& name) {
  x2d_split split = X2D_SPLIT_ALL;
  if (x2d_split_parse(name.c_str(), &split) != X2D_OK) usage(x2d_last_error());
  return split;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xtal2dos: crystal graph to density-of-states models"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--config", g.config_path, "JSON config file; flags override its values")->check(CLI::ExistingFile);
  app.add_option("--threads", g.threads, "Worker threads for dense kernels")->check(CLI::PositiveNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic JSONL dataset");
  long long gen_count = -1;
  std::optional<std::size_t> gen_ly;
  std::string gen_out;
  gen->add_option("--count", gen_count, "Number of samples")->required();
  gen->add_option("--ly", gen_ly, "Spectrum length");
  gen->add_option("--out", gen_out, "Output JSONL path")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::optional<std::string> data, val_data, encoder, decoder, loss, head, activation, resume;
  std::optional<std::size_t> epochs, batch, chunk, d_hid, ly, enc_layers, dec_layers, heads;
  std::optional<double> lr, clip;
  std::string checkpoint = "model.ckpt";
  std::string log_path = "train_log.csv";
  train->add_option("--data", data, "Training JSONL (train/val splits are hashed from ids)");
  train->add_option("--val-data", val_data, "Separate validation JSONL");
  train->add_option("--encoder", encoder, "unimp | gcn");
  train->add_option("--decoder", decoder, "rnn | rnn_attn | chunk_rnn | chunk_rnn_attn | transformer");
  train->add_option("--loss", loss, "kl | generalized_kl | mse");
  train->add_option("--head", head, "softmax | softplus | none");
  train->add_option("--activation", activation, "Activation name");
  train->add_option("--epochs", epochs, "Total epochs");
  train->add_option("--batch-size", batch, "Graphs per batch");
  train->add_option("--lr", lr, "Adam learning rate");
  train->add_option("--clip-norm", clip, "Global gradient-norm clip, 0 disables");
  train->add_option("--chunk", chunk, "Chunk length for chunked decoders");
  train->add_option("--d-hid", d_hid, "Hidden width");
  train->add_option("--ly", ly, "Spectrum length");
  train->add_option("--encoder-layers", enc_layers, "Encoder layers");
  train->add_option("--decoder-layers", dec_layers, "Transformer decoder layers");
  train->add_option("--heads", heads, "Attention heads (encoder and decoder)");
  train->add_option("--checkpoint", checkpoint, "Checkpoint written after every epoch");
  train->add_option("--log", log_path, "Per-epoch CSV log");
  train->add_option("--resume", resume, "Continue from this checkpoint")->check(CLI::ExistingFile);

  // eval / predict
  std::string ev_ckpt, ev_data, ev_split = "test";
  std::optional<std::string> ev_out;
  std::optional<double> bin_width;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  eval->add_option("--checkpoint", ev_ckpt, "Checkpoint path")->required();
  eval->add_option("--data", ev_data, "Dataset JSONL")->required();
  eval->add_option("--split", ev_split, "train | val | test | all");
  eval->add_option("--bin-width", bin_width, "Grid spacing for the Wasserstein distance");
  eval->add_option("--out", ev_out, "Write the JSON report here instead of stdout");
  auto* predict = app.add_subcommand("predict", "Export predictions as CSV");
  predict->add_option("--checkpoint", ev_ckpt, "Checkpoint path")->required();
  predict->add_option("--data", ev_data, "Dataset JSONL")->required();
  predict->add_option("--split", ev_split, "train | val | test | all");
  predict->add_option("--out", ev_out, "Write the CSV here instead of stdout");

  // bench
  auto* bench = app.add_subcommand("bench", "Time training epochs per decoder kind");
  std::optional<std::size_t> b_ly, b_samples, b_repeats, b_warmup, b_batch, b_dhid;
  std::vector<std::string> b_kinds;
  std::optional<std::string> b_out;
  bench->add_option("--ly", b_ly, "Spectrum length (default 128)");
  bench->add_option("--samples", b_samples, "Synthetic samples (default 64)");
  bench->add_option("--repeats", b_repeats, "Timed epochs per decoder (at least 5)");
  bench->add_option("--warmup", b_warmup, "Untimed warm-up epochs");
  bench->add_option("--batch-size", b_batch, "Graphs per batch");
  bench->add_option("--d-hid", b_dhid, "Hidden width");
  bench->add_option("--decoders", b_kinds, "Decoder kinds to time, comma separated")->delimiter(',');
  bench->add_option("--out", b_out, "Write the JSON report here instead of stdout");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      std::cout << app.help();
      return 0;
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e);
      usage(e.what());
    }

    int effective = 0;
    check(x2d_set_threads(g.threads, &effective));

    if (gen->parsed()) {
      if (gen_count <= 0) usage("--count must be a positive integer");
      json o;
      put(o, "l_y", gen_ly);
      const json cfg = json::parse(effective_config(g, o));
      x2d_dataset* raw = nullptr;
      check(x2d_dataset_generate(static_cast<std::size_t>(gen_count), cfg["seed"].get<std::uint64_t>(),
                                 cfg["l_y"].get<std::size_t>(), &raw));
      DatasetPtr ds(raw, x2d_dataset_free);
      check(x2d_dataset_save(ds.get(), gen_out.c_str()));
      return 0;
    }

    if (train->parsed()) {
      TrainerPtr trainer(nullptr, x2d_trainer_free);
      std::string config;
      json o;
      put(o, "train_data", data);
      put(o, "val_data", val_data);
      put(o, "encoder", encoder);
      put(o, "decoder", decoder);
      put(o, "loss", loss);
      put(o, "head", head);
      put(o, "activation", activation);
      put(o, "epochs", epochs);
      put(o, "batch_size", batch);
      put(o, "lr", lr);
      put(o, "clip_norm", clip);
      put(o, "chunk", chunk);
      put(o, "d_hid", d_hid);
      put(o, "l_y", ly);
      put(o, "encoder_layers", enc_layers);
      put(o, "decoder_layers", dec_layers);
      if (heads) {
        o["encoder_heads"] = *heads;
        o["decoder_heads"] = *heads;
      }
      if (resume) {
        trainer = load_trainer(*resume);
        OwnedString saved;
        check(x2d_trainer_config(trainer.get(), &saved.ptr));
        // Flags that restate the saved value are accepted; anything else but
        // --epochs would silently fork the run.
        const json stored = json::parse(saved.str());
        if (g.seed) o["seed"] = *g.seed;
        for (const auto& [key, value] : o.items()) {
          if (key != "epochs" && stored.at(key) != value) {
            usage("only --epochs may change when resuming (" + key + " differs from the checkpoint)");
          }
        }
        OwnedString merged;
        check(x2d_config_merge(saved.ptr, o.dump().c_str(), &merged.ptr));
        config = merged.str();
        check(x2d_trainer_set_epochs(trainer.get(), json::parse(config)["epochs"].get<std::size_t>()));
      } else {
        config = effective_config(g, o);
        check(x2d_config_validate(config.c_str()));
        x2d_trainer* raw = nullptr;
        check(x2d_trainer_create(config.c_str(), &raw));
        trainer.reset(raw);
      }
      const json cfg = json::parse(config);
      const std::string train_path = cfg["train_data"].get<std::string>();
      if (train_path.empty()) usage("train needs --data (or train_data in --config)");
      DatasetPtr train_ds = load_dataset(train_path, config);
      DatasetPtr val_ds(nullptr, x2d_dataset_free);
      const std::string val_path = cfg["val_data"].get<std::string>();
      if (!val_path.empty()) val_ds = load_dataset(val_path, config);

      std::size_t done = 0;
      check(x2d_trainer_epoch(trainer.get(), &done));
      const auto total = cfg["epochs"].get<std::size_t>();
      const bool append = resume.has_value() && std::filesystem::exists(log_path);
      if (!append) write_file(log_path, std::string(x2d_train_log_header()) + "\n");
      for (std::size_t e = done; e < total; ++e) {
        OwnedString row;
        check(x2d_trainer_fit_epoch(trainer.get(), train_ds.get(), val_ds.get(), nullptr, &row.ptr));
        write_file(log_path, row.str() + "\n", true);
        check(x2d_trainer_save(trainer.get(), checkpoint.c_str()));
      }
      if (done >= total) check(x2d_trainer_save(trainer.get(), checkpoint.c_str()));
      return 0;
    }

    if (eval->parsed() || predict->parsed()) {
      const x2d_split split = parse_split(ev_split);
      TrainerPtr trainer = load_trainer(ev_ckpt);
      OwnedString saved;
      check(x2d_trainer_config(trainer.get(), &saved.ptr));
      std::string config = saved.str();
      if (g.seed) {
        // The seed decides the hashed split assignment of the dataset.
        json o;
        o["seed"] = *g.seed;
        OwnedString merged;
        check(x2d_config_merge(saved.ptr, o.dump().c_str(), &merged.ptr));
        config = merged.str();
      }
      if (bin_width) check(x2d_trainer_set_bin_width(trainer.get(), *bin_width));
      DatasetPtr ds = load_dataset(ev_data, config);
      OwnedString text;
      if (eval->parsed()) {
        check(x2d_trainer_evaluate(trainer.get(), ds.get(), split, &text.ptr));
        write_output(ev_out, text.str() + "\n");
      } else {
        check(x2d_trainer_predict_csv(trainer.get(), ds.get(), split, &text.ptr));
        write_output(ev_out, text.str());
      }
      return 0;
    }

    if (bench->parsed()) {
      json o;
      json overrides;
      put(overrides, "l_y", b_ly);
      put(overrides, "batch_size", b_batch);
      put(overrides, "d_hid", b_dhid);
      if (!b_ly) overrides["l_y"] = 128;
      o["config"] = json::parse(effective_config(g, overrides));
      put(o, "samples", b_samples);
      put(o, "repeats", b_repeats);
      put(o, "warmup", b_warmup);
      if (!b_kinds.empty()) o["decoders"] = b_kinds;
      o["threads"] = g.threads;
      OwnedString report;
      check(x2d_bench_run(o.dump().c_str(), &report.ptr));
      write_output(b_out, report.str() + "\n");
      return 0;
    }
  } catch (const CliError& e) {
    emit_error(e);
    return e.status;
  } catch (const std::exception& e) {
    emit_error({X2D_ERR_INTERNAL, "internal", e.what()});
    return X2D_ERR_INTERNAL;
  }
  return 0;
}
