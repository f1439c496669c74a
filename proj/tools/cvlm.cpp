// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// cvlm: chat, generate, train, eval, bench, serve and weight tooling.

#include <CLI11.hpp>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "cvlm/archive.hpp"
#include "cvlm/error.hpp"
#include "cvlm/eval.hpp"
#include "cvlm/model.hpp"
#include "cvlm/perf.hpp"
#include "cvlm/pipeline.hpp"
#include "cvlm/serve.hpp"
#include "cvlm/trainer.hpp"
#include "json_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cvlm::tools {
namespace {

std::string dump(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

struct ModelFlags {
  std::string manifest;
  std::string weights;

  void add(CLI::App* app, bool weights_required = true) {
    app->add_option("--manifest", manifest, "Model manifest JSON")
        ->required()
        ->check(CLI::ExistingFile);
    auto* w =
        app->add_option("--weights", weights, "CVLM1 weight archive")->check(CLI::ExistingFile);
    if (weights_required) w->required();
  }
};

struct SamplingFlags {
  SamplingParams params;
  std::string system = kDefaultSystemPrompt;

  void add(CLI::App* app) {
    app->add_option("--temperature", params.temperature, "0 selects greedy decoding")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    app->add_option("--top-p", params.top_p)->capture_default_str()->check(CLI::Range(0.0, 1.0));
    app->add_option("--seed", params.seed)->capture_default_str();
    app->add_option("--max-new-tokens", params.max_new_tokens)
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--system", system, "System prompt (empty for none)");
  }
};

json usage_json(const Usage& u) {
  return {{"prompt_tokens", u.prompt_tokens},
          {"spliced_tokens", u.spliced_tokens},
          {"new_tokens", u.new_tokens}};
}

// ---- generate ---------------------------------------------------------------

struct GenerateCmd {
  ModelFlags model;
  SamplingFlags sampling;
  std::vector<std::string> images;
  std::string prompt;

  void add(CLI::App& root) {
    auto* app =
        root.add_subcommand("generate", "One-shot reply; prints the text then a JSON stats line");
    model.add(app);
    sampling.add(app);
    app->add_option("--image", images, "Image attached to the prompt (repeatable)")
        ->check(CLI::ExistingFile);
    app->add_option("--prompt", prompt)->required();
    app->final_callback([this] { run(); });
  }

  void run() {
    const Model m = load_model(model.manifest, model.weights);
    Conversation conv;
    conv.system = sampling.system;
    Turn turn;
    turn.text = prompt;
    for (const auto& path : images) turn.images.push_back(load_image(path));
    conv.turns.push_back(std::move(turn));
    const auto result = generate(m, conv, sampling.params);
    std::cout << result.text << "\n";
    std::cout << dump({{"finish_reason", finish_reason_name(result.finish_reason)},
                       {"tokens", result.tokens},
                       {"usage", usage_json(result.usage)},
                       {"manifest_hash", m.manifest_hash}})
              << std::endl;
    std::fprintf(stderr, "prefill %.2f ms, decode %.2f ms, first token %.2f ms\n",
                 result.timing.prefill_ms, result.timing.decode_ms, result.timing.first_token_ms);
  }
};

// ---- chat -------------------------------------------------------------------

struct ChatCmd {
  ModelFlags model;
  SamplingFlags sampling;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand(
        "chat", "Interactive loop; /image <path> attaches an image, /reset, /quit");
    model.add(app);
    sampling.add(app);
    app->final_callback([this] { run(); });
  }

  void run() {
    const Model m = load_model(model.manifest, model.weights);
    Conversation conv;
    conv.system = sampling.system;
    std::vector<RgbImage> pending;
    std::uint64_t turn_seed = sampling.params.seed;
    std::string line;
    std::cerr << "> " << std::flush;
    while (std::getline(std::cin, line)) {
      if (line == "/quit" || line == "/exit") break;
      if (line == "/reset") {
        conv.turns.clear();
        pending.clear();
        std::cerr << "(conversation cleared)\n> " << std::flush;
        continue;
      }
      if (line.rfind("/image ", 0) == 0) {
        try {
          pending.push_back(load_image(line.substr(7)));
          std::cerr << "(image attached)\n";
        } catch (const Error& e) {
          std::cerr << "error: " << e.what() << "\n";
        }
        std::cerr << "> " << std::flush;
        continue;
      }
      if (line.empty()) {
        std::cerr << "> " << std::flush;
        continue;
      }
      Turn turn;
      turn.text = line;
      turn.images = std::move(pending);
      pending.clear();
      conv.turns.push_back(std::move(turn));
      auto params = sampling.params;
      params.seed = turn_seed++;
      try {
        const auto result = generate(
            m, conv, params, [](const TokenEvent& ev) { std::cout << ev.text << std::flush; });
        std::cout << std::endl;
        conv.turns.push_back({Role::kAssistant, result.text, {}});
        std::fprintf(stderr, "[%s, %zu tokens, %.1f ms]\n",
                     finish_reason_name(result.finish_reason), result.usage.new_tokens,
                     result.timing.prefill_ms + result.timing.decode_ms);
      } catch (const Error& e) {
        conv.turns.pop_back();
        std::cerr << "error: " << e.what() << "\n";
      }
      std::cerr << "> " << std::flush;
    }
  }
};

// ---- train ------------------------------------------------------------------

struct TrainCmd {
  ModelFlags model;
  std::string stage;
  std::string data;
  std::string image_root;
  std::string out;
  std::optional<double> lr;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> warmup_ratio;
  std::optional<std::string> schedule;
  std::optional<std::string> system;
  std::uint64_t seed = 0;

  void add(CLI::App& root) {
    auto* app =
        root.add_subcommand("train", "Run one training stage; writes weights.cvlm and loss.csv");
    model.add(app);
    app->add_option("--stage", stage, "sft | stage1 | stage2")
        ->required()
        ->check(CLI::IsMember(
            {"sft", "sft_text", "stage1", "stage1_pretrain", "stage2", "stage2_finetune"}));
    app->add_option("--data", data, "JSON-lines conversations")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--image-root", image_root, "Base directory for relative image paths");
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--lr", lr);
    app->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
    app->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
    app->add_option("--warmup-ratio", warmup_ratio)->check(CLI::Range(0.0, 1.0));
    app->add_option("--schedule", schedule)->check(CLI::IsMember({"constant", "linear", "cosine"}));
    app->add_option("--system", system);
    app->add_option("--seed", seed)->capture_default_str();
    app->final_callback([this] { run(); });
  }

  void run() {
    const Model m = load_model(model.manifest, model.weights);
    auto cfg = TrainConfig::preset(parse_stage(stage));
    if (lr) cfg.lr = *lr;
    if (epochs) cfg.epochs = *epochs;
    if (batch_size) cfg.batch_size = *batch_size;
    if (warmup_ratio) cfg.warmup_ratio = *warmup_ratio;
    if (schedule) cfg.schedule = parse_schedule(*schedule);
    if (system) cfg.system = *system;
    cfg.seed = seed;
    cfg.validate();

    const auto samples =
        load_dataset(data, image_root.empty() ? std::nullopt : std::optional<fs::path>(image_root));
    const auto total = total_steps(cfg, samples.size());
    std::fprintf(stderr, "%s: %zu samples, %zu steps\n", stage_name(cfg.stage), samples.size(),
                 total);
    auto result = train_stage(m, samples, cfg, [total](const StepLog& s) {
      std::fprintf(stderr, "step %zu/%zu lr %.3e loss %.6f\n", s.step + 1, total, s.lr, s.loss);
    });
    fs::create_directories(out);
    save_archive(result.weights, fs::path(out) / "weights.cvlm");
    write_loss_csv(fs::path(out) / "loss.csv", result.log);
    json meta = {{"config", train_config_to_json(cfg)},
                 {"manifest_hash", m.manifest_hash},
                 {"samples", samples.size()},
                 {"steps", result.log.size()}};
    if (!result.log.empty()) {
      meta["first_loss"] = result.log.front().loss;
      meta["final_loss"] = result.log.back().loss;
    }
    std::ofstream(fs::path(out) / "train.json") << meta.dump(2) << "\n";
    std::cout << dump(meta) << std::endl;
  }
};

// ---- eval -------------------------------------------------------------------

struct EvalCmd {
  std::string manifest;
  std::string weights;
  SamplingFlags sampling;
  std::string benchmark;
  std::string name;
  std::string scorer = "exact";
  std::optional<std::string> stub_answer;
  std::string out;
  std::string label = "cvlm";
  bool compare = false;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("eval", "Score a JSON-lines benchmark");
    app->add_option("--manifest", manifest)->check(CLI::ExistingFile);
    app->add_option("--weights", weights)->check(CLI::ExistingFile);
    sampling.add(app);
    app->add_option("--benchmark", benchmark)->required()->check(CLI::ExistingFile);
    app->add_option("--name", name, "Benchmark name (default: file stem)");
    app->add_option("--scorer", scorer)
        ->capture_default_str()
        ->check(CLI::IsMember({"exact", "vqa", "yesno", "paired"}));
    app->add_option("--stub-answer", stub_answer, "Answer every record with this text");
    app->add_option("--out", out, "Write the report JSON here");
    app->add_option("--label", label, "Row label in the comparison table")->capture_default_str();
    app->add_flag("--compare", compare, "Print the row next to the reference row");
    app->final_callback([this] { run(); });
  }

  void run() {
    const auto records = load_benchmark(benchmark);
    const auto kind = parse_scorer(scorer);
    const std::string bench_name = name.empty() ? fs::path(benchmark).stem().string() : name;
    EvalReport report;
    if (stub_answer) {
      StubResponder responder(*stub_answer);
      report = run_eval(bench_name, records, responder, kind, {{"responder", "stub"}}, "");
    } else {
      if (manifest.empty() || weights.empty()) {
        throw CLI::RequiredError("--manifest and --weights (or --stub-answer)");
      }
      const Model m = load_model(manifest, weights);
      ModelResponder responder(m, sampling.params, sampling.system);
      json decoding = {{"temperature", sampling.params.temperature},
                       {"top_p", sampling.params.top_p},
                       {"seed", sampling.params.seed},
                       {"max_new_tokens", sampling.params.max_new_tokens}};
      report = run_eval(bench_name, records, responder, kind, decoding, m.manifest_hash);
    }
    const json doc = report_to_json(report);
    if (!out.empty()) std::ofstream(out) << doc.dump(2) << "\n";
    std::cout << report_table(report);
    if (compare) {
      std::cout << "\n"
                << render_comparison_table(
                       {comparison_reference_row(), comparison_row_from_report(label, report)});
    }
    if (report.failures > 0) std::fprintf(stderr, "%zu records failed\n", report.failures);
  }
};

// ---- bench ------------------------------------------------------------------

struct BenchCmd {
  std::string manifest;
  std::string weights;
  BenchConfig config;
  std::size_t max_layers = 0;
  std::size_t max_vocab = 0;
  std::string json_out;
  std::string label;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("bench", "Prefill latency and decode throughput");
    app->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    app->add_option("--weights", weights, "Omit to use random weights")->check(CLI::ExistingFile);
    app->add_option("--prompt-sizes", config.prompt_sizes)->delimiter(',')->capture_default_str();
    app->add_option("--new-tokens", config.new_tokens)->delimiter(',')->capture_default_str();
    app->add_option("--repetitions", config.repetitions)
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--seed", config.seed)->capture_default_str();
    app->add_flag("--image", config.include_image, "Also time vision + projector");
    app->add_option("--max-layers", max_layers, "Truncate the decoder depth (random weights only)");
    app->add_option("--max-vocab", max_vocab, "Truncate the vocabulary (random weights only)");
    app->add_option("--json", json_out, "Write the JSON report here");
    app->add_option("--label", label);
    app->final_callback([this] { run(); });
  }

  void run() {
    ModelManifest m = load_manifest(manifest);
    ParamMap<float> w;
    if (!weights.empty()) {
      if (max_layers > 0 || max_vocab > 0) {
        throw CLI::ValidationError("--max-layers/--max-vocab", "only apply to random weights");
      }
      w = load_archive(weights, m);
    } else {
      m = truncate_manifest(m, max_layers, max_vocab);
      const std::vector<std::string> prefixes =
          config.include_image ? std::vector<std::string>{} : std::vector<std::string>{"decoder."};
      w = init_random(m, config.seed, prefixes);
    }
    const auto report =
        bench_perf(m, w, config, label.empty() ? fs::path(manifest).stem().string() : label);
    const json doc = bench_to_json(report);
    if (!json_out.empty()) std::ofstream(json_out) << doc.dump(2) << "\n";
    std::cout << bench_table(report);
    std::cout << dump(doc) << std::endl;
  }
};

// ---- serve ------------------------------------------------------------------

ChatServer* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

struct ServeCmd {
  ModelFlags model;
  ServerConfig config;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("serve", "HTTP chat service (/v1/chat, /v1/health, /v1/model)");
    app->add_option("--manifest", model.manifest)
        ->required()
        ->envname("CVLM_MANIFEST")
        ->check(CLI::ExistingFile);
    app->add_option("--weights", model.weights)
        ->required()
        ->envname("CVLM_WEIGHTS")
        ->check(CLI::ExistingFile);
    app->add_option("--host", config.host)->capture_default_str()->envname("CVLM_HOST");
    app->add_option("--port", config.port, "0 picks a free port")
        ->capture_default_str()
        ->envname("CVLM_PORT");
    app->add_option("--workers", config.workers)
        ->capture_default_str()
        ->envname("CVLM_WORKERS")
        ->check(CLI::PositiveNumber);
    app->add_option("--queue", config.queue)->capture_default_str()->envname("CVLM_QUEUE");
    app->add_option("--max-request-bytes", config.max_request_bytes)
        ->capture_default_str()
        ->envname("CVLM_MAX_REQUEST_BYTES");
    app->add_option("--cors-origin", config.cors_origin, "Empty disables CORS headers")
        ->capture_default_str()
        ->envname("CVLM_CORS_ORIGIN");
    app->final_callback([this] { run(); });
  }

  void run() {
    ChatServer server(config);
    const int port = server.bind();
    server.load_async(model.manifest, model.weights);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::fprintf(stderr, "listening on %s:%d\n", config.host.c_str(), port);
    std::fflush(stderr);
    server.listen();
    g_server = nullptr;
  }
};

// ---- weights ----------------------------------------------------------------

struct InitWeightsCmd {
  std::string manifest;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<std::string> prefixes;
  std::string from;
  std::string name_map;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("init-weights", "Write a random (or converted) CVLM1 archive");
    app->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--out", out)->required();
    app->add_option("--prefix", prefixes, "Only tensors with this name prefix (repeatable)");
    app->add_option("--from", from, "safetensors checkpoint to convert")->check(CLI::ExistingFile);
    app->add_option("--name-map", name_map, "Rename rules for --from")->check(CLI::ExistingFile);
    app->final_callback([this] { run(); });
  }

  void run() {
    const auto m = load_manifest(manifest);
    auto params = init_random(m, seed, prefixes);
    std::size_t converted = 0;
    if (!from.empty()) {
      auto source = read_safetensors(from);
      if (!name_map.empty()) {
        std::ifstream in(name_map);
        source = remap_tensors(source, name_map_from_json(json::parse(in)));
      }
      for (auto& [name, tensor] : source) {
        auto it = params.find(name);
        if (it == params.end()) continue;
        if (tensor.shape() != it->second.shape()) {
          throw Error(ErrorCode::kShapeMismatch,
                      "converted tensor " + name + " has shape " + shape_str(tensor.shape()) +
                          ", manifest wants " + shape_str(it->second.shape()));
        }
        it->second = tensor;
        ++converted;
      }
    }
    save_archive(params, out);
    std::cout << dump({{"tensors", params.size()},
                       {"converted", converted},
                       {"manifest_hash", manifest_hash(m)},
                       {"out", out}})
              << std::endl;
  }
};

struct InspectCmd {
  std::string archive;
  std::string manifest;
  bool as_json = false;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("inspect-archive", "List the tensors of a CVLM1 archive");
    app->add_option("archive", archive)->required()->check(CLI::ExistingFile);
    app->add_option("--manifest", manifest, "Also verify names and shapes")
        ->check(CLI::ExistingFile);
    app->add_flag("--json", as_json);
    app->final_callback([this] { run(); });
  }

  void run() {
    const auto params = read_archive(archive);
    if (!manifest.empty()) verify_params(params, load_manifest(manifest));
    std::size_t total = 0;
    json list = json::array();
    for (const auto& [name, t] : params) {
      total += t.numel();
      char sum[17];
      std::snprintf(sum, sizeof(sum), "%016llx",
                    static_cast<unsigned long long>(tensor_checksum(t)));
      if (as_json) {
        list.push_back({{"name", name}, {"shape", t.shape()}, {"checksum", sum}});
      } else {
        std::printf("%-40s %-16s %s\n", name.c_str(), shape_str(t.shape()).c_str(), sum);
      }
    }
    if (as_json) {
      std::cout << dump({{"tensors", list}, {"parameters", total}}) << std::endl;
    } else {
      std::printf("%zu tensors, %zu parameters\n", params.size(), total);
    }
  }
};

}  // namespace
}  // namespace cvlm::tools

int main(int argc, char** argv) {
  using namespace cvlm::tools;
  CLI::App app{"cvlm: compact vision-language model runtime"};
  app.require_subcommand(1);
  app.fallthrough();
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON file with flag values; command-line flags win");

  GenerateCmd generate_cmd;
  ChatCmd chat_cmd;
  TrainCmd train_cmd;
  EvalCmd eval_cmd;
  BenchCmd bench_cmd;
  ServeCmd serve_cmd;
  InitWeightsCmd init_cmd;
  InspectCmd inspect_cmd;
  chat_cmd.add(app);
  generate_cmd.add(app);
  train_cmd.add(app);
  eval_cmd.add(app);
  bench_cmd.add(app);
  serve_cmd.add(app);
  init_cmd.add(app);
  inspect_cmd.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  } catch (const cvlm::Error& e) {
    std::cerr << "error [" << cvlm::error_code_name(e.code()) << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
