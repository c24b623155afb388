#include "crosstrace/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace crosstrace {

using nlohmann::json;

namespace {

const char* kCategoryShortNames[8] = {"other",    "early-vis", "object-vis",
                                      "late-vis", "early-txt", "object-txt",
                                      "late-txt", "last"};

Site site_from_name(const std::string& name) {
  if (name == "attn") return Site::Attn;
  if (name == "ffn") return Site::Ffn;
  if (name == "hidden") return Site::Hidden;
  throw std::invalid_argument("rr csv: unknown component '" + name + "'");
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

/// Linear white-to-red ramp over [0,1]; grey for cells with no data.
std::string heat_color(const RRCell& cell) {
  if (cell.n_included == 0) return "#cccccc";
  const double v = std::clamp(cell.mean_rr_clamped, 0.0, 1.0);
  const int gb = static_cast<int>(std::lround(255.0 * (1.0 - v)));
  char buf[8];
  snprintf(buf, sizeof(buf), "#ff%02x%02x", gb, gb);
  return buf;
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void write_rr_grid_csv(const std::filesystem::path& path, const RRGrid& grid,
                       bool clamped) {
  std::ofstream out = open_out(path);
  out << "component,layer,category,mean_rr,std,n_included,n_excluded\n";
  for (Site s : grid.sites) {
    for (int l : grid.layers) {
      for (Category c : grid.categories) {
        const RRCell& cell = grid.at(s, l, c);
        out << site_name(s) << ',' << l << ',' << static_cast<int>(c) << ','
            << format_double(clamped ? cell.mean_rr_clamped : cell.mean_rr)
            << ',' << format_double(cell.std_dev) << ',' << cell.n_included
            << ',' << cell.n_excluded << '\n';
      }
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

RRGrid read_rr_grid_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      line != "component,layer,category,mean_rr,std,n_included,n_excluded")
    throw std::runtime_error(path.string() + ": unexpected rr csv header");

  struct Row {
    Site site;
    int layer;
    Category category;
    RRCell cell;
  };
  std::vector<Row> rows;
  auto parse_stat = [](const std::string& s) {
    return s == "nan" ? std::numeric_limits<double>::quiet_NaN()
                      : std::stod(s);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 7)
      throw std::runtime_error(path.string() + ": malformed rr csv row");
    Row r;
    r.site = site_from_name(f[0]);
    r.layer = std::stoi(f[1]);
    r.category = static_cast<Category>(std::stoi(f[2]));
    r.cell.mean_rr = parse_stat(f[3]);
    r.cell.std_dev = parse_stat(f[4]);
    r.cell.mean_rr_clamped = r.cell.mean_rr;  // best available reconstruction
    r.cell.n_included = std::stoi(f[5]);
    r.cell.n_excluded = std::stoi(f[6]);
    rows.push_back(r);
  }

  RRGrid grid;
  for (const Row& r : rows) {
    if (std::find(grid.sites.begin(), grid.sites.end(), r.site) ==
        grid.sites.end())
      grid.sites.push_back(r.site);
    if (std::find(grid.layers.begin(), grid.layers.end(), r.layer) ==
        grid.layers.end())
      grid.layers.push_back(r.layer);
    if (std::find(grid.categories.begin(), grid.categories.end(),
                  r.category) == grid.categories.end())
      grid.categories.push_back(r.category);
  }
  grid.cells.assign(
      grid.sites.size() * grid.layers.size() * grid.categories.size(), {});
  for (const Row& r : rows) grid.at(r.site, r.layer, r.category) = r.cell;
  return grid;
}

void write_rr_grid_metadata(const std::filesystem::path& path,
                            const RRGrid& grid) {
  json cats = json::array();
  for (Category c : grid.categories)
    cats.push_back({{"index", static_cast<int>(c)},
                    {"name", kCategoryShortNames[static_cast<int>(c)]}});
  json j = {{"seed", grid.seed},
            {"sigma", grid.sigma},
            {"eps_d", grid.eps_d},
            {"n_samples", grid.n_samples},
            {"skipped_empty_patches", grid.skipped_empty_patches},
            {"checkpoint_hash", grid.checkpoint_hash},
            {"categories", cats}};
  write_json(path, j);
}

void write_attention_profile_csv(const std::filesystem::path& path,
                                 const AttentionProfile& profile) {
  std::ofstream out = open_out(path);
  out << "layer,mass_to_object_visual,mass_to_textual_object\n";
  for (size_t l = 0; l < profile.to_object_visual.size(); ++l)
    out << l << ',' << format_double(profile.to_object_visual[l]) << ','
        << format_double(profile.to_textual_object[l]) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_heatmap_svg(const std::filesystem::path& path, const RRGrid& grid,
                       Site site) {
  constexpr int kCell = 64, kRowH = 30, kLeft = 70, kTop = 46, kPad = 10;
  const auto n_cols = static_cast<int>(grid.categories.size());
  const auto n_rows = static_cast<int>(grid.layers.size());
  const int width = kLeft + n_cols * kCell + kPad;
  const int height = kTop + n_rows * kRowH + kPad;

  std::ofstream out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" font-family=\"monospace\" "
      << "font-size=\"11\">\n";
  out << "<text x=\"" << kLeft << "\" y=\"16\">recovery rate, component "
      << site_name(site) << " (clamped mean)</text>\n";
  for (int c = 0; c < n_cols; ++c) {
    const int cat = static_cast<int>(grid.categories[c]);
    out << "<text x=\"" << kLeft + c * kCell + 4 << "\" y=\"" << kTop - 6
        << "\">" << cat << ":" << kCategoryShortNames[cat] << "</text>\n";
  }
  for (int r = 0; r < n_rows; ++r) {
    out << "<text x=\"6\" y=\"" << kTop + r * kRowH + 19 << "\">L"
        << grid.layers[r] << "</text>\n";
    for (int c = 0; c < n_cols; ++c) {
      const RRCell& cell = grid.at(site, grid.layers[r], grid.categories[c]);
      out << "<rect x=\"" << kLeft + c * kCell << "\" y=\"" << kTop + r * kRowH
          << "\" width=\"" << kCell << "\" height=\"" << kRowH
          << "\" fill=\"" << heat_color(cell)
          << "\" stroke=\"#444444\" stroke-width=\"1\"/>\n";
      char label[16];
      if (cell.n_included > 0)
        snprintf(label, sizeof(label), "%.3f", cell.mean_rr_clamped);
      else
        snprintf(label, sizeof(label), "-");
      out << "<text x=\"" << kLeft + c * kCell + 4 << "\" y=\""
          << kTop + r * kRowH + 19 << "\">" << label << "</text>\n";
    }
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_metrics_log(const std::filesystem::path& path,
                       const std::vector<MetricsPoint>& log) {
  std::ofstream out = open_out(path);
  for (const auto& p : log)
    out << json{{"step", p.step}, {"loss", p.loss}, {"val_acc", p.val_acc}}
               .dump()
        << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json plan_json(const InjectionPlan& plan) {
  auto vec = [](const Vector& v) {
    std::vector<double> out(v.data(), v.data() + v.size());
    return out;
  };
  return json{{"n_layers", plan.n_layers},
              {"k1", plan.k1},
              {"k2", plan.k2},
              {"src_attn", plan.src_attn},
              {"tgt_attn", plan.tgt_attn},
              {"src_mlp", plan.src_mlp},
              {"tgt_mlp", plan.tgt_mlp},
              {"src_hidden", plan.src_hidden},
              {"tgt_hidden", plan.tgt_hidden},
              {"rr_attn", vec(plan.rr_attn)},
              {"rr_mlp", vec(plan.rr_mlp)},
              {"rr_hidden", vec(plan.rr_hidden)},
              {"lambda_attn", plan.lambda_a},
              {"lambda_mlp", plan.lambda_m},
              {"use_rr_scaling", plan.use_rr_scaling},
              {"use_normalization", plan.use_normalization},
              {"component", inject_component_name(plan.component)},
              {"target_mode", target_mode_name(plan.target_mode)}};
}

json binary_metrics_json(const BinaryMetrics& m) {
  return json{{"accuracy", m.accuracy},
              {"precision", m.precision},
              {"recall", m.recall},
              {"f1", m.f1}};
}

json chair_json(const ChairResult& c) {
  return json{
      {"c_s", c.c_s_defined ? json(c.c_s) : json()},
      {"c_i", c.c_i_defined ? json(c.c_i) : json()},
      {"total_mentioned", c.total_mentioned},
      {"total_hallucinated", c.total_hallucinated},
      {"total_sentences", c.total_sentences},
      {"hallucinated_sentences", c.hallucinated_sentences},
      {"convention_note",
       "c_s divides hallucinated objects by mentioned objects and c_i "
       "divides hallucinated sentences by sentences; much of the CHAIR "
       "literature attaches the S/I subscripts the other way around"}};
}

json latency_json(const LatencyResult& l) {
  return json{{"ttft_ms", l.ttft_ms},
              {"tpot_ms", l.tpot_ms},
              {"reps", l.reps},
              {"decode_len", l.decode_len}};
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace crosstrace
