#pragma once

#include <sdlab/bench/suite.hpp>
#include <sdlab/core/png_io.hpp>
#include <sdlab/edit/run.hpp>
#include <sdlab/eval/metrics.hpp>
#include <sdlab/eval/probe.hpp>
#include <sdlab/scenes/generators.hpp>
#include <sdlab/scenes/rasterize.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab::bench {

/// A method column in the report: estimator plus its lambda where relevant.
struct MethodSpec {
  edit::Method method = edit::Method::piva;
  double lambda = 0.4;
  std::string label;  // report column name; defaults to the method name

  std::string name() const { return label.empty() ? edit::method_name(method) : label; }
};

inline std::vector<MethodSpec> parse_methods(const std::string& csv) {
  std::vector<MethodSpec> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    MethodSpec m;
    const std::size_t colon = tok.find(':');
    if (colon == std::string::npos) {
      m.method = edit::method_from_name(tok);
    } else {
      // "piva:0.2" pins the regularizer weight and labels the column with it.
      m.method = edit::method_from_name(tok.substr(0, colon));
      std::size_t used = 0;
      try {
        m.lambda = std::stod(tok.substr(colon + 1), &used);
      } catch (const std::exception&) {
        throw std::invalid_argument("bad lambda in method token: " + tok);
      }
      if (used != tok.size() - colon - 1 || m.lambda < 0)
        throw std::invalid_argument("bad lambda in method token: " + tok);
      m.label = tok;
    }
    out.push_back(m);
  }
  if (out.empty()) throw std::invalid_argument("no methods given");
  return out;
}

struct MetricsRow {
  std::string entry;
  std::string method;
  double mse = 0;
  double psnr = 0;
  double ssim = 0;
  double alignment = 0;
  double feature_distance = 0;
};

struct MethodAggregate {
  std::string method;
  int rows = 0;
  double mean_mse = 0, median_mse = 0;
  double mean_psnr = 0, median_psnr = 0;
  double mean_ssim = 0, median_ssim = 0;
  double mean_alignment = 0, median_alignment = 0;
  double mean_feature_distance = 0, median_feature_distance = 0;
};

struct FailureRecord {
  std::string entry;
  std::string method;
  std::string error;
};

struct MetricsReport {
  int entries = 0;
  int methods = 0;
  std::vector<MetricsRow> rows;
  std::vector<MethodAggregate> aggregates;
  std::vector<FailureRecord> failures;

  /// The suite as a whole fails only when more than 20% of the scheduled
  /// (entry, method) runs errored.
  bool ok() const {
    const int scheduled = entries * methods;
    return scheduled == 0 || double(failures.size()) <= 0.2 * double(scheduled);
  }
};

/// Per-entry images kept for the comparison grids.
template <class S>
struct EntryArtifacts {
  std::string id;
  ImageT<S> source;
  std::vector<std::pair<std::string, ImageT<S>>> edited;  // (method label, image)
};

template <class S>
struct SuiteResult {
  MetricsReport report;
  std::vector<EntryArtifacts<S>> artifacts;
};

struct SuiteRunConfig {
  edit::EditConfig edit;  // template; method, lambda, and seed set per run
  int eval_poses = 16;
  std::uint64_t seed = 0;
};

namespace detail {

inline void aggregate_rows(MetricsReport& rep, const std::vector<MethodSpec>& methods) {
  for (const auto& m : methods) {
    std::vector<double> mse, psnr, ssim, align, fdist;
    for (const auto& r : rep.rows) {
      if (r.method != m.name()) continue;
      mse.push_back(r.mse);
      psnr.push_back(r.psnr);
      ssim.push_back(r.ssim);
      align.push_back(r.alignment);
      fdist.push_back(r.feature_distance);
    }
    MethodAggregate a;
    a.method = m.name();
    a.rows = int(mse.size());
    auto mean = [](const std::vector<double>& v) {
      if (v.empty()) return 0.0;
      double s = 0;
      for (double x : v) s += x;
      return s / double(v.size());
    };
    a.mean_mse = mean(mse);
    a.median_mse = edit::detail::median(mse);
    a.mean_psnr = mean(psnr);
    a.median_psnr = edit::detail::median(psnr);
    a.mean_ssim = mean(ssim);
    a.median_ssim = edit::detail::median(ssim);
    a.mean_alignment = mean(align);
    a.median_alignment = edit::detail::median(align);
    a.mean_feature_distance = mean(fdist);
    a.median_feature_distance = edit::detail::median(fdist);
    rep.aggregates.push_back(a);
  }
}

}  // namespace detail

/// Runs every (entry, method) pair: fit the source generator from the
/// entry's scene, run the edit, score the result over a shared set of
/// evaluation poses (preservation metrics against the source render at the
/// same pose, alignment against the target attributes). Failures are
/// recorded per pair and the suite continues.
template <class S, class Gen = scenes::PixelCanvas<S>>
SuiteResult<S> run_suite(const BenchSuite& suite, const std::vector<MethodSpec>& methods,
                         const diffusion::ConditionedDenoiser<S>& den,
                         const diffusion::NoiseScheduleT<S>& sched,
                         const eval::AttributeProbe<S>& probe, const SuiteRunConfig& cfg) {
  eval::require_certified(probe);
  if (methods.empty()) throw std::invalid_argument("run_suite: no methods");
  const int res = den.config().res;
  SuiteResult<S> result;
  result.report.entries = int(suite.entries.size());
  result.report.methods = int(methods.size());

  for (const auto& entry : suite.entries) {
    EntryArtifacts<S> art;
    art.id = entry.id();

    // Shared evaluation poses per entry: the identity view plus sampled ones.
    Rng eval_rng(stable_hash64(entry.id() + "|eval", cfg.seed));
    std::vector<scenes::ViewPose> poses{scenes::ViewPose::identity()};
    for (int k = 1; k < cfg.eval_poses; ++k) poses.push_back(scenes::sample_pose(eval_rng));

    bool have_source = false;
    Gen source_gen = [&] {
      if constexpr (edit::GenTraits<Gen>::kUsesAdam)
        return Gen(scenes::NeuralCanvasConfig{});
      else
        return Gen(res);
    }();
    try {
      if (!entry.spec) throw std::runtime_error("entry has no scene spec to render");
      ImageT<S> target = scenes::rasterize(*entry.spec, res).template cast<S>();
      if constexpr (edit::GenTraits<Gen>::kUsesAdam) {
        Rng init_rng(stable_hash64(entry.id() + "|fit", cfg.seed));
        source_gen.init_params(init_rng);
      }
      scenes::fit_generator(source_gen, {{target, scenes::ViewPose::identity()}});
      art.source = source_gen.render(scenes::ViewPose::identity(), res);
      have_source = true;
    } catch (const std::exception& ex) {
      for (const auto& m : methods)
        result.report.failures.push_back({entry.id(), m.name(), ex.what()});
    }
    if (!have_source) {
      result.artifacts.push_back(std::move(art));
      continue;
    }

    const int c_src = (entry.source_code ? *entry.source_code
                                         : scenes::PromptCode::encode(*entry.spec))
                          .value;
    for (const auto& m : methods) {
      try {
        if (!entry.target_code) throw std::runtime_error("entry has no target code");
        edit::EditConfig ec = cfg.edit;
        ec.method = m.method;
        ec.lambda = m.lambda;
        ec.seed = stable_hash64(entry.id() + "|" + m.name(), cfg.seed);
        auto st = edit::run_edit<S>(source_gen, c_src, entry.target_code->value, den, sched, ec,
                                    &probe);
        if (st.aborted) throw std::runtime_error("edit aborted: " + st.abort_reason);

        MetricsRow row;
        row.entry = entry.id();
        row.method = m.name();
        double mse_sum = 0, ssim_sum = 0, align_sum = 0, fd_sum = 0;
        for (const auto& pose : poses) {
          ImageT<S> es = source_gen.render(pose, res);
          ImageT<S> ee = st.edited.render(pose, res);
          mse_sum += eval::mse(ee, es);
          ssim_sum += eval::ssim(ee, es);
          align_sum += eval::alignment(probe, ee, *entry.target_code);
          fd_sum += eval::feature_distance(probe, ee, es);
        }
        const double n = double(poses.size());
        row.mse = mse_sum / n;
        row.psnr = eval::psnr_from_mse(row.mse);
        row.ssim = ssim_sum / n;
        row.alignment = align_sum / n;
        row.feature_distance = fd_sum / n;
        result.report.rows.push_back(row);
        art.edited.emplace_back(m.name(), st.edited.render(scenes::ViewPose::identity(), res));
      } catch (const std::exception& ex) {
        result.report.failures.push_back({entry.id(), m.name(), ex.what()});
      }
    }
    result.artifacts.push_back(std::move(art));
  }

  detail::aggregate_rows(result.report, methods);
  return result;
}

/// Serialization of reports ---------------------------------------------------

inline ojson report_to_json(const MetricsReport& rep) {
  ojson j;
  j["entries"] = rep.entries;
  j["methods"] = rep.methods;
  ojson rows = ojson::array();
  for (const auto& r : rep.rows) {
    ojson o;
    o["entry"] = r.entry;
    o["method"] = r.method;
    o["mse"] = r.mse;
    o["psnr"] = r.psnr;
    o["ssim"] = r.ssim;
    o["alignment"] = r.alignment;
    o["feature_distance"] = r.feature_distance;
    rows.push_back(std::move(o));
  }
  j["rows"] = std::move(rows);
  ojson aggs = ojson::array();
  for (const auto& a : rep.aggregates) {
    ojson o;
    o["method"] = a.method;
    o["rows"] = a.rows;
    o["mean_mse"] = a.mean_mse;
    o["median_mse"] = a.median_mse;
    o["mean_psnr"] = a.mean_psnr;
    o["median_psnr"] = a.median_psnr;
    o["mean_ssim"] = a.mean_ssim;
    o["median_ssim"] = a.median_ssim;
    o["mean_alignment"] = a.mean_alignment;
    o["median_alignment"] = a.median_alignment;
    o["mean_feature_distance"] = a.mean_feature_distance;
    o["median_feature_distance"] = a.median_feature_distance;
    aggs.push_back(std::move(o));
  }
  j["aggregates"] = std::move(aggs);
  ojson fails = ojson::array();
  for (const auto& f : rep.failures) {
    ojson o;
    o["entry"] = f.entry;
    o["method"] = f.method;
    o["error"] = f.error;
    fails.push_back(std::move(o));
  }
  j["failures"] = std::move(fails);
  return j;
}

inline MetricsReport report_from_json(const ojson& j) {
  MetricsReport rep;
  rep.entries = j.at("entries").get<int>();
  rep.methods = j.at("methods").get<int>();
  for (const auto& o : j.at("rows")) {
    MetricsRow r;
    r.entry = o.at("entry").get<std::string>();
    r.method = o.at("method").get<std::string>();
    r.mse = o.at("mse").get<double>();
    r.psnr = o.at("psnr").get<double>();
    r.ssim = o.at("ssim").get<double>();
    r.alignment = o.at("alignment").get<double>();
    r.feature_distance = o.at("feature_distance").get<double>();
    rep.rows.push_back(std::move(r));
  }
  for (const auto& o : j.at("aggregates")) {
    MethodAggregate a;
    a.method = o.at("method").get<std::string>();
    a.rows = o.at("rows").get<int>();
    a.mean_mse = o.at("mean_mse").get<double>();
    a.median_mse = o.at("median_mse").get<double>();
    a.mean_psnr = o.at("mean_psnr").get<double>();
    a.median_psnr = o.at("median_psnr").get<double>();
    a.mean_ssim = o.at("mean_ssim").get<double>();
    a.median_ssim = o.at("median_ssim").get<double>();
    a.mean_alignment = o.at("mean_alignment").get<double>();
    a.median_alignment = o.at("median_alignment").get<double>();
    a.mean_feature_distance = o.at("mean_feature_distance").get<double>();
    a.median_feature_distance = o.at("median_feature_distance").get<double>();
    rep.aggregates.push_back(std::move(a));
  }
  for (const auto& o : j.at("failures"))
    rep.failures.push_back({o.at("entry").get<std::string>(), o.at("method").get<std::string>(),
                            o.at("error").get<std::string>()});
  return rep;
}

inline constexpr const char* kReportCsvHeader =
    "entry,method,mse,psnr,ssim,alignment,feature_distance";

inline std::string sanitize_filename(std::string s) {
  for (char& c : s)
    if (c == '/' || c == '\\' || c == '#' || c == ' ' || c == ':') c = '_';
  return s;
}

/// Writes report.json, report.csv, a markdown summary table, and one
/// source-vs-methods image grid per entry.
template <class S>
void emit_report(const SuiteResult<S>& result, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "grids", ec);
  if (ec) throw std::runtime_error("cannot create report directory: " + out_dir);

  {
    std::ofstream out(fs::path(out_dir) / "report.json");
    if (!out) throw std::runtime_error("cannot write report.json under " + out_dir);
    out << report_to_json(result.report).dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "report.csv");
    if (!out) throw std::runtime_error("cannot write report.csv under " + out_dir);
    out << kReportCsvHeader << "\n";
    char buf[512];
    for (const auto& r : result.report.rows) {
      std::snprintf(buf, sizeof(buf), "%s,%s,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.entry.c_str(),
                    r.method.c_str(), r.mse, r.psnr, r.ssim, r.alignment, r.feature_distance);
      out << buf;
    }
  }
  {
    std::ofstream out(fs::path(out_dir) / "summary.md");
    out << "| method | rows | mse | psnr | ssim | alignment | feature distance |\n";
    out << "|---|---|---|---|---|---|---|\n";
    char buf[512];
    for (const auto& a : result.report.aggregates) {
      std::snprintf(buf, sizeof(buf), "| %s | %d | %.4g | %.4g | %.4g | %.4g | %.4g |\n",
                    a.method.c_str(), a.rows, a.mean_mse, a.mean_psnr, a.mean_ssim,
                    a.mean_alignment, a.mean_feature_distance);
      out << buf;
    }
    if (!result.report.failures.empty()) {
      out << "\nFailures: " << result.report.failures.size() << "\n";
      for (const auto& f : result.report.failures)
        out << "- " << f.entry << " [" << f.method << "]: " << f.error << "\n";
    }
  }

  // Grid per entry: source tile followed by one tile per method.
  for (const auto& art : result.artifacts) {
    if (art.source.size() == 0) continue;
    const int res = art.source.h;
    ImageT<S> grid = ImageT<S>::zeros(res, res * (1 + int(art.edited.size())), 3);
    auto paste = [&](const ImageT<S>& tile, int col) {
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < res; ++y)
          for (int x = 0; x < res; ++x) grid.at(y, col * res + x, c) = tile.at(y, x, c);
    };
    paste(art.source, 0);
    for (std::size_t k = 0; k < art.edited.size(); ++k)
      paste(art.edited[k].second, int(k) + 1);
    write_png_any(
        (fs::path(out_dir) / "grids" / (sanitize_filename(art.id) + ".png")).string(), grid);
  }
}

}  // namespace sdlab::bench
