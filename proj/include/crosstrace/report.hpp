#pragma once

// Deterministic artifact writers: RR-grid CSV (plus reader), metadata and
// plan dumps as JSON, metrics logs, the attention-profile CSV, and
// hand-rolled SVG heatmaps.

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "crosstrace/eval.hpp"
#include "crosstrace/inject.hpp"
#include "crosstrace/trace.hpp"
#include "crosstrace/train.hpp"

namespace crosstrace {

/// Shortest round-trip decimal; "nan" for NaN. Used by every CSV writer.
std::string format_double(double v);

/// Columns: component,layer,category,mean_rr,std,n_included,n_excluded.
/// `clamped` substitutes the clamped mean in the mean_rr column.
void write_rr_grid_csv(const std::filesystem::path& path, const RRGrid& grid,
                       bool clamped = false);

/// Rebuilds a grid (axes and cell stats) from the CSV; metadata fields are
/// not part of the CSV and stay default.
RRGrid read_rr_grid_csv(const std::filesystem::path& path);

void write_rr_grid_metadata(const std::filesystem::path& path,
                            const RRGrid& grid);

/// Columns: layer,mass_to_object_visual,mass_to_textual_object.
void write_attention_profile_csv(const std::filesystem::path& path,
                                 const AttentionProfile& profile);

/// One component's layers x categories heatmap, colored by clamped mean RR.
void write_heatmap_svg(const std::filesystem::path& path, const RRGrid& grid,
                       Site site);

/// Training log as one JSON object per line: {step, loss, val_acc}.
void write_metrics_log(const std::filesystem::path& path,
                       const std::vector<MetricsPoint>& log);

nlohmann::json plan_json(const InjectionPlan& plan);
nlohmann::json binary_metrics_json(const BinaryMetrics& m);
nlohmann::json chair_json(const ChairResult& c);
nlohmann::json latency_json(const LatencyResult& l);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace crosstrace
