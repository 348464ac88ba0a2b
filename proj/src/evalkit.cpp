#include "flns/evalkit.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "json.hpp"

namespace flns {

namespace {

std::span<const float> view(const RowVector<float>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

bool in_top_k(TokenId token, std::span<const float> ref, std::size_t k) {
  // Rank of `token` under (value desc, id asc) is the number of entries that
  // sort strictly before it.
  const float v = ref[static_cast<std::size_t>(token)];
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < ref.size(); ++j) {
    if (ref[j] > v || (ref[j] == v && j < static_cast<std::size_t>(token))) {
      if (++ahead >= k) return false;
    }
  }
  return true;
}

void check_k(std::size_t k, std::size_t d_vocab) {
  if (k < 1 || k > d_vocab) {
    throw Error(ErrorCode::kRangeError, "k=" + std::to_string(k) + " outside [1, " + std::to_string(d_vocab) + "]");
  }
}

// Accumulates one (method, layer, offset) cell over samples.
struct Cell {
  std::vector<std::size_t> hits;  // per k
  double surprisal_sum = 0.0;
  std::size_t n = 0;
};

struct Prediction {
  std::optional<RowVector<float>> dist;  // absent for token-only methods
  std::optional<TokenId> token;          // absent when the method abstains
};

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---- sampling ---------------------------------------------------------------

DocumentSplit split_documents(std::size_t n_documents, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "test fraction must lie in [0, 1]");
  }
  std::vector<std::size_t> order(n_documents);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n_documents)));
  DocumentSplit split;
  split.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(split.test.begin(), split.test.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

std::vector<EvalSample> sample_positions(const TransformerModel& model,
                                         const std::vector<std::vector<TokenId>>& corpus,
                                         std::span<const std::size_t> documents, std::size_t count, int max_offset,
                                         std::uint64_t seed) {
  if (max_offset < 0) throw Error(ErrorCode::kRangeError, "negative max offset");
  const auto max_len = static_cast<std::size_t>(model.config.max_seq_len);
  const auto steps = static_cast<std::size_t>(max_offset) + 1;
  if (steps >= max_len) throw Error(ErrorCode::kSequenceTooLong, "horizon does not fit in max_seq_len");
  const std::size_t max_context = max_len - steps;
  const auto net = model.network();
  const auto L = static_cast<std::size_t>(model.config.n_layers);

  // Candidate (document, T) with T the context length. One forward per
  // document covers every prefix because attention is causal.
  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (const std::size_t d : documents) {
    if (d >= corpus.size()) throw Error(ErrorCode::kRangeError, "document index " + std::to_string(d));
    const auto& doc = corpus[d];
    const std::size_t last = std::min(doc.size() == 0 ? 0 : doc.size() - 1, max_context);
    if (last < 1) continue;
    const Trace<float> trace = net.forward({.tokens = std::span<const TokenId>(doc.data(), last)});
    for (std::size_t t = 1; t <= last; ++t) {
      const RowVector<float> y = trace.dists.row(static_cast<Eigen::Index>(t - 1));
      if (argmax(view(y)) == doc[t]) candidates.emplace_back(d, t);
    }
  }

  std::mt19937_64 rng(seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  std::vector<EvalSample> samples;
  samples.reserve(count);
  for (const auto& [d, t] : candidates) {
    if (samples.size() == count) break;
    const auto& doc = corpus[d];
    const std::span<const TokenId> context(doc.data(), t);
    GenerationResult gen = greedy_generate(model, context, steps);
    // The batched and prefix forwards can disagree on a near-tie.
    if (gen.new_tokens.front() != doc[t]) continue;
    EvalSample s;
    s.id = samples.size();
    s.document = d;
    s.context.assign(context.begin(), context.end());
    s.continuation = gen.new_tokens;
    s.ref_dists = std::move(gen.step_dists);
    const Trace<float> ctx = net.forward({.tokens = context});
    for (std::size_t l = 0; l <= L; ++l) s.hidden_cache.push_back(ctx.state(static_cast<int>(l), t - 1));
    for (std::size_t i = 0; i < steps; ++i) {
      s.final_hidden.push_back(gen.final_trace.state(static_cast<int>(L), t - 1 + i));
    }
    samples.push_back(std::move(s));
  }
  if (samples.size() < count) {
    throw Error(ErrorCode::kSamplingExhausted, "only " + std::to_string(samples.size()) + " of " +
                                                   std::to_string(count) + " requested positions qualify");
  }
  return samples;
}

double mean_context_length(std::span<const EvalSample> samples) {
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : samples) sum += static_cast<double>(s.context_len());
  return sum / static_cast<double>(samples.size());
}

// ---- bigram -----------------------------------------------------------------

BigramTable BigramTable::build(const std::vector<std::vector<TokenId>>& corpus) {
  BigramTable table;
  for (const auto& doc : corpus) {
    for (std::size_t i = 0; i + 1 < doc.size(); ++i) ++table.counts_[{doc[i], doc[i + 1]}];
  }
  // counts_ iterates by (first asc, second asc), so a strict > keeps the
  // lowest id among equally frequent successors.
  std::map<TokenId, std::uint64_t> best;
  for (const auto& [pair, n] : table.counts_) {
    auto it = best.find(pair.first);
    if (it == best.end() || n > it->second) {
      best[pair.first] = n;
      table.successor_[pair.first] = pair.second;
    }
  }
  return table;
}

std::uint64_t BigramTable::count(TokenId first, TokenId second) const {
  const auto it = counts_.find({first, second});
  return it == counts_.end() ? 0 : it->second;
}

std::optional<TokenId> BigramTable::successor(TokenId token) const {
  const auto it = successor_.find(token);
  if (it == successor_.end()) return std::nullopt;
  return it->second;
}

// ---- metrics ----------------------------------------------------------------

bool precision_at_k(std::span<const float> pred, std::span<const float> ref, std::size_t k,
                    PrecisionDirection direction) {
  if (pred.size() != ref.size()) throw Error(ErrorCode::kDimensionError, "distribution sizes differ");
  check_k(k, ref.size());
  if (direction == PrecisionDirection::kPredictionInReference) return in_top_k(argmax(pred), ref, k);
  return in_top_k(argmax(ref), pred, k);
}

bool token_in_top_k(TokenId token, std::span<const float> ref, std::size_t k) {
  check_k(k, ref.size());
  if (token < 0 || static_cast<std::size_t>(token) >= ref.size()) {
    throw Error(ErrorCode::kRangeError, "token id " + std::to_string(token));
  }
  return in_top_k(token, ref, k);
}

double surprisal(std::span<const float> ref, TokenId token) {
  if (token < 0 || static_cast<std::size_t>(token) >= ref.size()) {
    throw Error(ErrorCode::kRangeError, "token id " + std::to_string(token));
  }
  return -std::log(std::max(static_cast<double>(ref[static_cast<std::size_t>(token)]), kSurprisalFloor));
}

// ---- categories -------------------------------------------------------------

TokenCategories categorize_token(std::string_view text, std::string_view punctuation) {
  TokenCategories c;
  const bool space = !text.empty() && text.front() == ' ';
  const std::string_view body = space ? text.substr(1) : text;
  bool any_letter = false, any_lower = false, any_upper = false, all_digits = !body.empty();
  for (const char ch : body) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalpha(u)) {
      any_letter = true;
      (std::islower(u) ? any_lower : any_upper) = true;
    }
    if (!std::isdigit(u)) all_digits = false;
    if (punctuation.find(ch) != std::string_view::npos) c.punctuation = true;
  }
  if (any_letter && !any_upper) (space ? c.lowercase_with_space : c.lowercase_no_space) = true;
  if (any_letter && !any_lower) (space ? c.uppercase_with_space : c.uppercase_no_space) = true;
  c.len_lt_4 = body.size() < 4;
  c.len_ge_4 = !c.len_lt_4;
  c.numerical = all_digits;
  return c;
}

bool category_flag(const TokenCategories& c, std::string_view name) {
  if (name == "lowercase_no_space") return c.lowercase_no_space;
  if (name == "lowercase_with_space") return c.lowercase_with_space;
  if (name == "uppercase_no_space") return c.uppercase_no_space;
  if (name == "uppercase_with_space") return c.uppercase_with_space;
  if (name == "len_lt_4") return c.len_lt_4;
  if (name == "len_ge_4") return c.len_ge_4;
  if (name == "punctuation") return c.punctuation;
  if (name == "numerical") return c.numerical;
  throw Error(ErrorCode::kRangeError, "unknown category '" + std::string(name) + "'");
}

// ---- calibration ------------------------------------------------------------

std::vector<CalibrationBucket> calibration_report(std::span<const double> confidences, const std::vector<bool>& correct) {
  if (confidences.size() != correct.size()) throw Error(ErrorCode::kDimensionError, "calibration inputs differ");
  static constexpr double kEdges[] = {0.0, 0.3, 0.6, 0.9, 1.0};
  std::array<std::size_t, 4> n{}, hit{};
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    std::size_t b = 3;
    while (b > 0 && c < kEdges[b]) --b;
    ++n[b];
    if (correct[i]) ++hit[b];
  }
  std::vector<CalibrationBucket> out;
  for (std::size_t b = 0; b < 4; ++b) {
    if (n[b] == 0) continue;
    out.push_back({kEdges[b], kEdges[b + 1], n[b], static_cast<double>(hit[b]) / static_cast<double>(n[b])});
  }
  return out;
}

// ---- driver -----------------------------------------------------------------

std::optional<double> MetricsReport::value(std::string_view method, int layer, int offset, std::size_t k,
                                           std::string_view metric) const {
  for (const auto& r : rows) {
    if (r.method == method && r.layer == layer && r.offset == offset && r.k == k && r.metric == metric) {
      return r.value;
    }
  }
  return std::nullopt;
}

MetricsReport evaluate_methods(const TransformerModel& model, std::span<const EvalSample> samples,
                               const Artifacts& artifacts, const EvalRequest& request) {
  if (samples.empty()) throw Error(ErrorCode::kEmptyInput, "no evaluation samples");
  const auto d_vocab = static_cast<std::size_t>(model.config.d_vocab);
  for (const std::size_t k : request.ks) check_k(k, d_vocab);
  for (const int l : request.layers) {
    if (l < 1 || l > model.config.n_layers) throw Error(ErrorCode::kRangeError, "layer " + std::to_string(l));
  }
  int max_offset = 0;
  for (const int n : request.offsets) {
    if (n < 0) throw Error(ErrorCode::kRangeError, "negative offset");
    max_offset = std::max(max_offset, n);
  }
  for (const auto& s : samples) {
    if (s.horizon() < static_cast<std::size_t>(max_offset)) {
      throw Error(ErrorCode::kSampleTooShort, "sample " + std::to_string(s.id) + " does not cover offset " +
                                                  std::to_string(max_offset));
    }
  }

  MetricsReport report;
  report.sample_count = samples.size();
  report.mean_context_length = mean_context_length(samples);

  // Per sample category flags of the token each offset targets.
  auto target_categories = [&](const EvalSample& s, int offset) {
    return categorize_token(model.tokenizer.text(s.continuation[static_cast<std::size_t>(offset)]), request.punctuation);
  };

  auto missing = [](const std::string& method, int layer, int offset) {
    return Error(ErrorCode::kArtifactMissing, "no trained artifact for method " + method + ", layer " +
                                                  std::to_string(layer) + ", N=" + std::to_string(offset));
  };

  // Each entry scores one (method, layer) pair over all offsets at once.
  struct Job {
    std::string method;
    int layer;
    std::function<std::vector<Prediction>(const EvalSample&)> predict;
  };
  std::vector<Job> jobs;

  for (const auto& method : request.methods) {
    if (method == "bigram") {
      if (!artifacts.bigram) throw missing("bigram", 0, 1);
      const BigramTable& table = *artifacts.bigram;
      // Offset N predicts x_{T+N+1} from the preceding token x_{T+N}.
      jobs.push_back({"bigram", 0, [&table, max_offset](const EvalSample& s) {
                        std::vector<Prediction> out;
                        for (int n = 0; n <= max_offset; ++n) {
                          const TokenId prev = n == 0 ? s.context.back() : s.continuation[static_cast<std::size_t>(n - 1)];
                          out.push_back({std::nullopt, table.successor(prev)});
                        }
                        return out;
                      }});
    } else if (method == "probe-vocab" || method == "probe-hidden") {
      const ProbeKind kind = method == "probe-vocab" ? ProbeKind::kDirectVocab : ProbeKind::kHiddenState;
      for (const int l : request.layers) {
        std::vector<const LinearProbe*> probes(static_cast<std::size_t>(max_offset) + 1, nullptr);
        for (const int n : request.offsets) {
          const auto it = artifacts.probes.find({kind, l, n});
          if (it == artifacts.probes.end()) throw missing(method, l, n);
          probes[static_cast<std::size_t>(n)] = &it->second;
        }
        jobs.push_back({method, l, [&model, probes, l](const EvalSample& s) {
                          std::vector<Prediction> out(probes.size());
                          for (std::size_t n = 0; n < probes.size(); ++n) {
                            if (!probes[n]) continue;
                            out[n].dist = probe_predict(*probes[n], s.hidden_cache[static_cast<std::size_t>(l)], model);
                          }
                          return out;
                        }});
      }
    } else if (method == "fixed") {
      if (artifacts.fixed_prompts.empty()) throw missing("fixed", 0, 0);
      for (const auto& prompt : artifacts.fixed_prompts) {
        if (prompt.substituted) {
          report.notes.push_back("fixed prompt '" + prompt.name + "' replaced by toy analogue '" + prompt.text + "'");
        }
        for (const int l : request.layers) {
          jobs.push_back({"fixed:" + prompt.name, l, [&model, &prompt, l, max_offset](const EvalSample& s) {
                            const auto r = fixed_intervention(model, prompt, s, l, max_offset);
                            std::vector<Prediction> out;
                            for (const auto& d : r.dists) out.push_back({d, std::nullopt});
                            return out;
                          }});
        }
      }
    } else if (method == "learned") {
      for (const int l : request.layers) {
        const auto it = artifacts.soft_prompts.find(l);
        if (it == artifacts.soft_prompts.end()) throw missing("learned", l, 1);
        const SoftPrompt& soft = it->second;
        jobs.push_back({"learned", l, [&model, &soft, max_offset](const EvalSample& s) {
                          const auto r = soft_intervention(model, soft, s, max_offset);
                          std::vector<Prediction> out;
                          for (const auto& d : r.dists) out.push_back({d, std::nullopt});
                          return out;
                        }});
      }
    } else {
      throw Error(ErrorCode::kInvalidConfig, "unknown method '" + method + "'");
    }
  }

  // (method, layer) -> per-sample predictions, kept for category and
  // calibration passes over the learned prompt.
  std::map<std::pair<std::string, int>, std::vector<std::vector<Prediction>>> kept;

  for (const auto& job : jobs) {
    std::vector<Cell> cells(static_cast<std::size_t>(max_offset) + 1);
    for (auto& c : cells) c.hits.assign(request.ks.size(), 0);
    std::vector<std::vector<Prediction>> all;
    all.reserve(samples.size());
    for (const auto& s : samples) {
      std::vector<Prediction> preds = job.predict(s);
      for (const int n : request.offsets) {
        const auto& p = preds[static_cast<std::size_t>(n)];
        const auto ref = view(s.ref_dists[static_cast<std::size_t>(n)]);
        Cell& cell = cells[static_cast<std::size_t>(n)];
        ++cell.n;
        std::optional<TokenId> top = p.token;
        if (p.dist) top = argmax(view(*p.dist));
        for (std::size_t ki = 0; ki < request.ks.size(); ++ki) {
          bool hit = false;
          if (p.dist) {
            hit = precision_at_k(view(*p.dist), ref, request.ks[ki], request.direction);
          } else if (top) {
            // A token-only method has no ranking of its own, so both
            // directions reduce to membership of its token.
            hit = request.direction == PrecisionDirection::kPredictionInReference ? token_in_top_k(*top, ref, request.ks[ki])
                                                                                 : *top == argmax(ref);
          }
          if (hit) ++cell.hits[ki];
        }
        cell.surprisal_sum += top ? surprisal(ref, *top) : -std::log(kSurprisalFloor);
      }
      if (job.method == "learned") all.push_back(std::move(preds));
    }
    for (const int n : request.offsets) {
      const Cell& cell = cells[static_cast<std::size_t>(n)];
      const double denom = static_cast<double>(cell.n);
      for (std::size_t ki = 0; ki < request.ks.size(); ++ki) {
        report.rows.push_back({job.method, job.layer, n, request.ks[ki], "precision",
                               static_cast<double>(cell.hits[ki]) / denom});
      }
      report.rows.push_back({job.method, job.layer, n, 0, "surprisal", cell.surprisal_sum / denom});
    }
    if (job.method == "learned") kept[{job.method, job.layer}] = std::move(all);
  }

  // Layer curves and soft peak checks for the learned prompt.
  const bool have_k1 = std::find(request.ks.begin(), request.ks.end(), std::size_t{1}) != request.ks.end();
  if (have_k1 && !kept.empty()) {
    for (const int n : request.offsets) {
      int best_layer = -1;
      double best = -1.0;
      for (const int l : request.layers) {
        const auto v = report.value("learned", l, n, 1, "precision");
        if (v && *v > best) {
          best = *v;
          best_layer = l;
        }
      }
      if (best_layer < 0) continue;
      report.learned_peak_layer[n] = best_layer;
      if (n >= 1 && best_layer >= model.config.n_layers) {
        report.flags.push_back("learned precision@1 at N=" + std::to_string(n) + " peaks at the last layer");
      }
    }
    const int cat_n = request.category_offset;
    if (report.learned_peak_layer.count(cat_n)) {
      const int l = report.learned_peak_layer.at(cat_n);
      report.best_learned_layer = l;
      const auto& preds = kept.at({"learned", l});
      std::map<std::string, std::pair<std::size_t, std::size_t>> tally;
      std::vector<double> conf;
      std::vector<bool> correct;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        const auto& p = preds[i][static_cast<std::size_t>(cat_n)];
        const auto ref = view(s.ref_dists[static_cast<std::size_t>(cat_n)]);
        const bool hit = argmax(view(*p.dist)) == argmax(ref);
        const TokenCategories c = target_categories(s, cat_n);
        for (const auto& name : kCategoryNames) {
          if (!category_flag(c, name)) continue;
          auto& [count, hits] = tally[name];
          ++count;
          if (hit) ++hits;
        }
        conf.push_back(static_cast<double>(*std::max_element(ref.begin(), ref.end())));
        correct.push_back(hit);
      }
      for (const auto& name : kCategoryNames) {
        const auto it = tally.find(name);
        if (it == tally.end()) continue;
        report.categories.push_back({"learned", l, name, it->second.first,
                                     static_cast<double>(it->second.second) / static_cast<double>(it->second.first)});
      }
      CalibrationRow row{"learned", l, cat_n, calibration_report(conf, correct), true};
      for (std::size_t b = 1; b < row.buckets.size(); ++b) {
        if (row.buckets[b].accuracy < row.buckets[b - 1].accuracy) row.monotone = false;
      }
      if (!row.monotone) report.flags.push_back("learned-prompt calibration is not monotone across confidence buckets");
      report.calibration.push_back(std::move(row));
    }
  }
  return report;
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["schema_version"] = MetricsReport::kSchemaVersion;
  j["sample_count"] = report.sample_count;
  j["mean_context_length"] = report.mean_context_length;
  auto& rows = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"method", r.method}, {"layer", r.layer}, {"N", r.offset}, {"k", r.k}, {"metric", r.metric},
                    {"value", r.value}});
  }
  auto& cats = j["categories"] = nlohmann::ordered_json::array();
  for (const auto& c : report.categories) {
    cats.push_back({{"method", c.method}, {"layer", c.layer}, {"category", c.category}, {"count", c.count},
                    {"accuracy", c.accuracy}});
  }
  auto& cal = j["calibration"] = nlohmann::ordered_json::array();
  for (const auto& c : report.calibration) {
    nlohmann::ordered_json buckets = nlohmann::ordered_json::array();
    for (const auto& b : c.buckets) {
      buckets.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}, {"accuracy", b.accuracy}});
    }
    cal.push_back({{"method", c.method}, {"layer", c.layer}, {"N", c.offset}, {"monotone", c.monotone},
                   {"buckets", std::move(buckets)}});
  }
  j["best_learned_layer"] = report.best_learned_layer ? nlohmann::ordered_json(*report.best_learned_layer) : nullptr;
  auto& peaks = j["learned_peak_layer"] = nlohmann::ordered_json::object();
  for (const auto& [n, l] : report.learned_peak_layer) peaks[std::to_string(n)] = l;
  j["flags"] = report.flags;
  j["notes"] = report.notes;
  return j.dump(2) + "\n";
}

std::string report_to_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << "method,layer,N,k,metric,value\n";
  for (const auto& r : report.rows) {
    out << r.method << ',' << r.layer << ',' << r.offset << ',' << r.k << ',' << r.metric << ','
        << fmt_double(r.value) << '\n';
  }
  return out.str();
}

}  // namespace flns
