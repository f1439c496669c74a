// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "cvlm/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cvlm {

using nlohmann::json;
namespace fs = std::filesystem;

EvalRecord eval_record_from_json(const json& doc) {
  EvalRecord r;
  try {
    if (auto it = doc.find("id"); it != doc.end()) {
      r.id = it->is_string() ? it->get<std::string>() : it->dump();
    }
    r.question = doc.at("question").get<std::string>();
    if (auto it = doc.find("image"); it != doc.end() && !it->is_null()) {
      r.image = it->get<std::string>();
    }
    for (const char* key : {"answers", "references", "answer"}) {
      auto it = doc.find(key);
      if (it == doc.end()) continue;
      if (it->is_array()) {
        r.references = it->get<std::vector<std::string>>();
      } else {
        r.references.push_back(it->get<std::string>());
      }
      break;
    }
    if (auto it = doc.find("category"); it != doc.end()) r.category = it->get<std::string>();
    if (auto it = doc.find("pair_id"); it != doc.end() && !it->is_null()) {
      r.pair_id = it->is_string() ? it->get<std::string>() : it->dump();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("eval record: ") + e.what());
  }
  if (r.references.empty()) {
    throw Error(ErrorCode::kParse, "eval record " + r.id + " has no reference answers");
  }
  return r;
}

std::vector<EvalRecord> load_benchmark(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open benchmark " + path.string());
  std::vector<EvalRecord> out;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto r = eval_record_from_json(json::parse(line));
      if (r.id.empty()) r.id = std::to_string(out.size());
      if (r.image && r.image->is_relative()) r.image = path.parent_path() / *r.image;
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kParse,
                  path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string normalize_answer(const std::string& text) {
  std::string cleaned;
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;
    cleaned += static_cast<char>(std::tolower(c));
  }
  std::istringstream words(cleaned);
  std::string word, out;
  while (words >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

namespace {

void check_predictions(const std::vector<EvalRecord>& records,
                       const std::vector<std::string>& predictions) {
  if (predictions.size() < records.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                "missing prediction for record " + records[predictions.size()].id);
  }
  if (predictions.size() > records.size()) {
    throw Error(ErrorCode::kInvalidArgument, "more predictions than records");
  }
}

bool reference_is_yes(const EvalRecord& r) {
  const auto ref = normalize_answer(r.references.front());
  if (ref != "yes" && ref != "no") {
    throw Error(ErrorCode::kInvalidArgument,
                "record " + r.id + " has non yes/no reference '" + r.references.front() + "'");
  }
  return ref == "yes";
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double score_exact_match(const std::vector<EvalRecord>& records,
                         const std::vector<std::string>& predictions, bool vqa_consensus) {
  check_predictions(records, predictions);
  if (records.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto pred = normalize_answer(predictions[i]);
    std::size_t matches = 0;
    for (const auto& ref : records[i].references) {
      if (!pred.empty() && normalize_answer(ref) == pred) ++matches;
    }
    if (vqa_consensus) {
      total += std::min(static_cast<double>(matches) / 3.0, 1.0);
    } else {
      total += matches > 0 ? 1.0 : 0.0;
    }
  }
  return total / static_cast<double>(records.size());
}

std::optional<bool> map_yes_no(const std::string& prediction) {
  std::string word;
  for (unsigned char c : prediction) {
    if (std::isalpha(c)) {
      word += static_cast<char>(std::tolower(c));
    } else if (!word.empty()) {
      break;
    }
  }
  if (word == "yes") return true;
  if (word == "no") return false;
  return std::nullopt;
}

YesNoMetrics score_yes_no(const std::vector<EvalRecord>& records,
                          const std::vector<std::string>& predictions) {
  check_predictions(records, predictions);
  YesNoMetrics m;
  std::size_t yes = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const bool ref = reference_is_yes(records[i]);
    const auto pred = map_yes_no(predictions[i]);
    if (!pred) ++m.unmapped;
    if (pred && *pred) ++yes;
    const bool said_yes = pred ? *pred : !ref;  // unmappable answers are wrong
    if (ref && said_yes) ++m.tp;
    if (ref && !said_yes) ++m.fn;
    if (!ref && said_yes) ++m.fp;
    if (!ref && !said_yes) ++m.tn;
  }
  m.accuracy = ratio(m.tp + m.tn, records.size());
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.yes_ratio = ratio(yes, records.size());
  return m;
}

PairedMetrics score_paired(const std::vector<EvalRecord>& records,
                           const std::vector<std::string>& predictions) {
  check_predictions(records, predictions);
  struct Pair {
    std::string category;
    std::vector<bool> correct;
  };
  std::map<std::string, Pair> pairs;
  std::vector<std::string> pair_order;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.pair_id) throw Error(ErrorCode::kInvalidArgument, "record " + r.id + " has no pair_id");
    const bool ref = reference_is_yes(r);
    const auto pred = map_yes_no(predictions[i]);
    auto [it, inserted] = pairs.try_emplace(r.category + '\x1f' + *r.pair_id);
    if (inserted) {
      it->second.category = r.category;
      pair_order.push_back(it->first);
    }
    it->second.correct.push_back(pred.has_value() && *pred == ref);
  }

  PairedMetrics out;
  std::map<std::string, std::array<std::size_t, 4>> counts;  // q, q_ok, pairs, pairs_ok
  std::size_t q = 0, q_ok = 0, p = 0, p_ok = 0;
  for (const auto& key : pair_order) {
    const auto& pair = pairs.at(key);
    if (pair.correct.size() != 2) {
      throw Error(ErrorCode::kInvalidArgument, "pair " + key.substr(key.find('\x1f') + 1) +
                                                   " has " + std::to_string(pair.correct.size()) +
                                                   " records; expected 2");
    }
    auto& c = counts[pair.category];
    const auto ok =
        static_cast<std::size_t>(std::count(pair.correct.begin(), pair.correct.end(), true));
    c[0] += 2;
    c[1] += ok;
    c[2] += 1;
    c[3] += ok == 2 ? 1 : 0;
    q += 2;
    q_ok += ok;
    p += 1;
    p_ok += ok == 2 ? 1 : 0;
  }
  for (const auto& [cat, c] : counts) {
    PairedCategory pc;
    pc.questions = c[0];
    pc.pairs = c[2];
    pc.acc = ratio(c[1], c[0]);
    pc.acc_plus = ratio(c[3], c[2]);
    pc.combined = 100.0 * pc.acc + 100.0 * pc.acc_plus;
    out.combined += pc.combined;
    out.per_category[cat] = pc;
  }
  out.acc = ratio(q_ok, q);
  out.acc_plus = ratio(p_ok, p);
  return out;
}

Scorer parse_scorer(const std::string& name) {
  if (name == "exact") return Scorer::kExact;
  if (name == "vqa") return Scorer::kVqa;
  if (name == "yesno") return Scorer::kYesNo;
  if (name == "paired") return Scorer::kPaired;
  throw Error(ErrorCode::kInvalidArgument, "unknown scorer '" + name + "'");
}

const char* scorer_name(Scorer scorer) {
  switch (scorer) {
    case Scorer::kExact:
      return "exact";
    case Scorer::kVqa:
      return "vqa";
    case Scorer::kYesNo:
      return "yesno";
    case Scorer::kPaired:
      return "paired";
  }
  return "?";
}

std::string ModelResponder::answer(const EvalRecord& record) {
  Conversation conv;
  conv.system = system_;
  Turn turn;
  turn.text = record.question;
  if (record.image) turn.images.push_back(load_image(*record.image));
  conv.turns.push_back(std::move(turn));
  auto text = generate(model_, conv, params_).text;
  const auto first = text.find_first_not_of(" \t\n");
  const auto last = text.find_last_not_of(" \t\n");
  return first == std::string::npos ? "" : text.substr(first, last - first + 1);
}

EvalReport run_eval(const std::string& benchmark, const std::vector<EvalRecord>& records,
                    Responder& responder, Scorer scorer, json decoding, std::string manifest_hash) {
  EvalReport report;
  report.benchmark = benchmark;
  report.scorer = scorer;
  report.decoding = std::move(decoding);
  report.manifest_hash = std::move(manifest_hash);
  report.records = records.size();

  std::vector<std::string> predictions;
  predictions.reserve(records.size());
  for (const auto& r : records) {
    try {
      predictions.push_back(responder.answer(r));
    } catch (const std::exception&) {
      predictions.emplace_back();
      ++report.failures;
      report.failed_ids.push_back(r.id);
    }
  }

  switch (scorer) {
    case Scorer::kExact:
    case Scorer::kVqa: {
      const double acc = score_exact_match(records, predictions, scorer == Scorer::kVqa);
      report.metric = "accuracy";
      report.score = acc;
      report.metrics["accuracy"] = acc;
      break;
    }
    case Scorer::kYesNo: {
      const auto m = score_yes_no(records, predictions);
      report.metric = "f1";
      report.score = m.f1;
      report.metrics = {{"accuracy", m.accuracy},   {"precision", m.precision},
                        {"recall", m.recall},       {"f1", m.f1},
                        {"yes_ratio", m.yes_ratio}, {"unmapped", m.unmapped}};
      break;
    }
    case Scorer::kPaired: {
      const auto m = score_paired(records, predictions);
      report.metric = "combined";
      report.score = m.combined;
      report.metrics = {{"acc", m.acc}, {"acc_plus", m.acc_plus}, {"combined", m.combined}};
      for (const auto& [cat, c] : m.per_category) {
        report.per_category[cat] = {{"acc", c.acc},
                                    {"acc_plus", c.acc_plus},
                                    {"combined", c.combined},
                                    {"questions", c.questions},
                                    {"pairs", c.pairs}};
      }
      break;
    }
  }
  return report;
}

json report_to_json(const EvalReport& r) {
  return {{"benchmark", r.benchmark},  {"scorer", scorer_name(r.scorer)},
          {"metric", r.metric},        {"score", r.score},
          {"metrics", r.metrics},      {"per_category", r.per_category},
          {"decoding", r.decoding},    {"manifest_hash", r.manifest_hash},
          {"records", r.records},      {"failures", r.failures},
          {"failed_ids", r.failed_ids}};
}

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::string metric_cell(const std::string& name, const json& v) {
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  return fixed(v.get<double>(), name == "combined" ? 1 : 4);
}

std::string pad_right(const std::string& s, std::size_t w) {
  return s + std::string(w > s.size() ? w - s.size() : 0, ' ');
}

std::string pad_left(const std::string& s, std::size_t w) {
  return std::string(w > s.size() ? w - s.size() : 0, ' ') + s;
}

std::string canonical(const std::string& name) {
  std::string out;
  for (unsigned char c : name) {
    if (std::isalnum(c)) out += static_cast<char>(std::tolower(c));
  }
  return out;
}

}  // namespace

std::string report_table(const EvalReport& r) {
  std::vector<std::pair<std::string, std::string>> rows = {
      {"benchmark", r.benchmark},
      {"scorer", scorer_name(r.scorer)},
      {"records", std::to_string(r.records)},
      {"failures", std::to_string(r.failures)},
  };
  for (const auto& [name, v] : r.metrics.items()) rows.emplace_back(name, metric_cell(name, v));
  std::size_t w = 0;
  for (const auto& row : rows) w = std::max(w, row.first.size());
  std::string out;
  for (const auto& [k, v] : rows) out += pad_right(k, w) + "  " + v + "\n";

  if (!r.per_category.empty()) {
    std::vector<std::array<std::string, 4>> cells = {{"category", "acc", "acc_plus", "combined"}};
    for (const auto& [cat, c] : r.per_category.items()) {
      cells.push_back({cat, fixed(c["acc"].get<double>(), 4), fixed(c["acc_plus"].get<double>(), 4),
                       fixed(c["combined"].get<double>(), 1)});
    }
    std::array<std::size_t, 4> widths{};
    for (const auto& row : cells) {
      for (std::size_t i = 0; i < 4; ++i) widths[i] = std::max(widths[i], row[i].size());
    }
    out += "\n";
    for (const auto& row : cells) {
      out += pad_right(row[0], widths[0]);
      for (std::size_t i = 1; i < 4; ++i) out += "  " + pad_left(row[i], widths[i]);
      out += "\n";
    }
  }
  return out;
}

ComparisonRow comparison_reference_row() {
  return {"reference (phi-2 2.7b)", {71.4, 35.9, 68.4, 48.6, 85.0, 1335.1, 59.8, 28.9}};
}

ComparisonRow comparison_row_from_report(const std::string& label, const EvalReport& report) {
  static const std::map<std::string, std::size_t> kAliases = {
      {"vqav2", 0}, {"vizwiz", 1}, {"sqai", 2}, {"scienceqa", 2}, {"vqat", 3}, {"textvqa", 3},
      {"pope", 4},  {"mme", 5},    {"mmb", 6},  {"mmbench", 6},   {"mmvet", 7}};
  ComparisonRow row{label, {}};
  auto it = kAliases.find(canonical(report.benchmark));
  if (it == kAliases.end()) return row;
  row.values[it->second] = report.scorer == Scorer::kPaired ? report.score : 100.0 * report.score;
  return row;
}

std::string render_comparison_table(const std::vector<ComparisonRow>& rows) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"model"};
  for (const char* c : kComparisonColumns) header.emplace_back(c);
  cells.push_back(header);
  for (const auto& row : rows) {
    std::vector<std::string> line = {row.label};
    for (const auto& v : row.values) line.push_back(v ? fixed(*v, 1) : "-");
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], line[i].size());
  }
  std::string out;
  for (const auto& line : cells) {
    out += pad_right(line[0], widths[0]);
    for (std::size_t i = 1; i < line.size(); ++i) out += "  " + pad_left(line[i], widths[i]);
    out += "\n";
  }
  return out;
}

}  // namespace cvlm
