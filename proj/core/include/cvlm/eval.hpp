// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

// Benchmark scoring: exact match (optionally VQA consensus), yes/no
// confusion metrics, paired-question scoring, and report emitters.

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "cvlm/model.hpp"
#include "cvlm/pipeline.hpp"

namespace cvlm {

struct EvalRecord {
  std::string id;
  std::string question;
  std::optional<std::filesystem::path> image;
  std::vector<std::string> references;
  std::string category;
  std::optional<std::string> pair_id;
};

EvalRecord eval_record_from_json(const nlohmann::json& doc);

// JSON-lines. Accepted keys: id, question, image, answers | references |
// answer, category, pair_id. Relative images resolve against the file's dir.
std::vector<EvalRecord> load_benchmark(const std::filesystem::path& path);

// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
std::string normalize_answer(const std::string& text);

// Mean over records of normalized membership in the references. With
// vqa_consensus, a record scores min(#matching references / 3, 1).
double score_exact_match(const std::vector<EvalRecord>& records,
                         const std::vector<std::string>& predictions, bool vqa_consensus = false);

// First alphabetic word: "yes" -> true, "no" -> false, otherwise nullopt.
std::optional<bool> map_yes_no(const std::string& prediction);

struct YesNoMetrics {
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double yes_ratio = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t unmapped = 0;
};

// "yes" is the positive class. Unmappable predictions count as wrong.
YesNoMetrics score_yes_no(const std::vector<EvalRecord>& records,
                          const std::vector<std::string>& predictions);

struct PairedCategory {
  double acc = 0;
  double acc_plus = 0;
  double combined = 0;  // 100 * acc + 100 * acc_plus
  std::size_t questions = 0;
  std::size_t pairs = 0;
};

struct PairedMetrics {
  double acc = 0;
  double acc_plus = 0;
  double combined = 0;  // summed over categories
  std::map<std::string, PairedCategory> per_category;
};

PairedMetrics score_paired(const std::vector<EvalRecord>& records,
                           const std::vector<std::string>& predictions);

enum class Scorer { kExact, kVqa, kYesNo, kPaired };
Scorer parse_scorer(const std::string& name);
const char* scorer_name(Scorer scorer);

class Responder {
 public:
  virtual ~Responder() = default;
  virtual std::string answer(const EvalRecord& record) = 0;
};

// Answers every question with a fixed string.
class StubResponder : public Responder {
 public:
  explicit StubResponder(std::string reply) : reply_(std::move(reply)) {}
  std::string answer(const EvalRecord&) override { return reply_; }

 private:
  std::string reply_;
};

class ModelResponder : public Responder {
 public:
  ModelResponder(const Model& model, SamplingParams params, std::string system)
      : model_(model), params_(params), system_(std::move(system)) {}
  std::string answer(const EvalRecord& record) override;

 private:
  const Model& model_;
  SamplingParams params_;
  std::string system_;
};

struct EvalReport {
  std::string benchmark;
  Scorer scorer = Scorer::kExact;
  std::string metric;
  double score = 0;
  nlohmann::json metrics = nlohmann::json::object();  // name -> value, keys sorted
  nlohmann::json per_category = nlohmann::json::object();
  nlohmann::json decoding = nlohmann::json::object();
  std::string manifest_hash;
  std::size_t records = 0;
  std::size_t failures = 0;
  std::vector<std::string> failed_ids;
};

// Failures to answer a record are recorded (empty prediction), not fatal.
EvalReport run_eval(const std::string& benchmark, const std::vector<EvalRecord>& records,
                    Responder& responder, Scorer scorer, nlohmann::json decoding,
                    std::string manifest_hash);

nlohmann::json report_to_json(const EvalReport& report);
// Aligned text table; metrics with 4 decimals, combined scores with 1.
std::string report_table(const EvalReport& report);

inline constexpr std::array<const char*, 8> kComparisonColumns = {
    "VQAv2", "VizWiz", "SQA-I", "VQA-T", "POPE", "MME", "MMB", "MMVet"};

struct ComparisonRow {
  std::string label;
  std::array<std::optional<double>, 8> values;
};

// Published scores of the reference configuration.
ComparisonRow comparison_reference_row();

// Places a report's score in its column (percent scale, MME as combined).
// Benchmarks that do not name a column leave the row empty.
ComparisonRow comparison_row_from_report(const std::string& label, const EvalReport& report);

// One decimal per cell, "-" for missing values, right-aligned columns.
std::string render_comparison_table(const std::vector<ComparisonRow>& rows);

}  // namespace cvlm
