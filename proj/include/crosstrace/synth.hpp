#pragma once

// Synthetic grid-world corpus: images are R x C grids of feature cells,
// objects occupy horizontal runs of cells, and every image pairs with a
// templated presence question ("is there a <obj> in the image ?") plus a
// caption listing the objects in raster order.

#include <filesystem>
#include <string>
#include <vector>

#include "crosstrace/model.hpp"
#include "crosstrace/rng.hpp"
#include "crosstrace/types.hpp"

namespace crosstrace {

/// Fixed token inventory. Ids [0, n_objects) are object names; the grammar
/// tokens follow. Kept tiny so the head layer stays cheap.
struct Vocab {
  std::vector<std::string> words;
  int n_objects = 0;
  int is_ = -1, there_ = -1, a_ = -1, in_ = -1, the_ = -1, image_ = -1;
  int qmark = -1, period = -1, yes = -1, no = -1, nothing = -1;
  int describe = -1, stop = -1;

  static Vocab standard();
  int size() const { return static_cast<int>(words.size()); }
  int id(const std::string& word) const;
  const std::string& word(int id) const;
};

/// One placed object: a run of raster-order cell indices within a single row.
struct ObjectSpan {
  int object_id = -1;
  std::vector<int> cells;
};

struct GridImage {
  int rows = 0, cols = 0;
  Matrix cells;  // n_cells x feat_dim, background rows are zero
  std::vector<ObjectSpan> objects;

  int n_cells() const { return rows * cols; }
  bool contains(int object_id) const;
  const ObjectSpan* find(int object_id) const;
};

struct SynthConfig {
  int grid_rows = 6;
  int grid_cols = 6;
  int feat_dim = 7;  // rgb + 4-way shape one-hot
  int min_objects = 1;
  int max_objects = 3;
  int max_run = 3;          // longest object span, in cells
  double p_negative = 0.5;  // query an absent object with this probability
  double p_empty = 0.05;    // drop all objects with this probability
  int early_textual = 2;    // question tokens counted as early-textual
  int n_train = 2000;
  int n_val = 200;
  int n_eval = 400;

  void validate() const;
};

struct QASample {
  GridImage image;
  std::vector<int> question_ids;
  int queried_object = -1;
  bool answer_yes = false;
  std::vector<Category> categories;  // over visual + question positions
  bool contiguous_object = true;     // queried-object cells form one raster run
  std::vector<int> caption_ids;      // caption continuation incl. stop token
  std::string split;
};

struct Dataset {
  Vocab vocab;
  SynthConfig config;
  std::vector<QASample> samples;

  std::vector<const QASample*> split(const std::string& name) const;
};

Matrix render_cells(const std::vector<ObjectSpan>& objects, int rows, int cols,
                    int feat_dim);
GridImage gen_image(const SynthConfig& cfg, Rng& rng);

std::vector<int> make_question(const Vocab& vocab, int object_id);
std::vector<int> make_caption(const GridImage& image, const Vocab& vocab);

/// Category labels over the concatenated visual+question sequence. Visual
/// positions partition into early/object/late around the queried object's
/// run; question tokens get early-textual (first `early_textual`), the
/// object word, late-textual, and the final position.
std::vector<Category> annotate(const GridImage& image,
                               const std::vector<int>& question_ids,
                               int queried_object, const Vocab& vocab,
                               int early_textual = 2);

QASample gen_sample(const SynthConfig& cfg, const Vocab& vocab, Rng& rng,
                    const std::string& split);
Dataset gen_dataset(const SynthConfig& cfg, Rng& rng);

/// JSONL with a versioned header line; samples store placement + query and
/// everything else is re-derived on load.
void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

/// Convenience: embed a QA sample's image+question with its annotations.
MultimodalSequence embed_qa(const Weights& w, const QASample& s);

}  // namespace crosstrace
