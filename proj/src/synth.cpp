#include "crosstrace/synth.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace crosstrace {

using nlohmann::json;

namespace {

constexpr int kNumObjects = 8;
constexpr int kNumShapes = 4;
const char* kObjectNames[kNumObjects] = {"dog",   "cat",  "car",  "tree",
                                         "house", "bird", "fish", "star"};
// One distinct color per object type.
const double kPalette[kNumObjects][3] = {
    {1.0, 0.1, 0.1}, {0.1, 1.0, 0.1}, {0.1, 0.1, 1.0}, {1.0, 1.0, 0.1},
    {1.0, 0.1, 1.0}, {0.1, 1.0, 1.0}, {0.9, 0.9, 0.9}, {0.5, 0.5, 0.5}};

int rand_below(Rng& rng, int n) {
  return static_cast<int>(rng.next_double() * n);
}

}  // namespace

Vocab Vocab::standard() {
  Vocab v;
  v.n_objects = kNumObjects;
  for (int i = 0; i < kNumObjects; ++i) v.words.emplace_back(kObjectNames[i]);
  auto add = [&v](const char* w) {
    v.words.emplace_back(w);
    return static_cast<int>(v.words.size()) - 1;
  };
  v.is_ = add("is");
  v.there_ = add("there");
  v.a_ = add("a");
  v.in_ = add("in");
  v.the_ = add("the");
  v.image_ = add("image");
  v.qmark = add("?");
  v.period = add(".");
  v.yes = add("yes");
  v.no = add("no");
  v.nothing = add("nothing");
  v.describe = add("describe");
  v.stop = add("<stop>");
  return v;
}

int Vocab::id(const std::string& word) const {
  for (size_t i = 0; i < words.size(); ++i)
    if (words[i] == word) return static_cast<int>(i);
  throw std::invalid_argument("vocab: unknown word '" + word + "'");
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("vocab: id out of range");
  return words[id];
}

bool GridImage::contains(int object_id) const {
  return find(object_id) != nullptr;
}

const ObjectSpan* GridImage::find(int object_id) const {
  for (const auto& o : objects)
    if (o.object_id == object_id) return &o;
  return nullptr;
}

void SynthConfig::validate() const {
  if (grid_rows <= 0 || grid_cols <= 0)
    throw std::invalid_argument("synth.grid dimensions must be positive");
  if (feat_dim != 7)
    throw std::invalid_argument("synth.feat_dim must be 7 (rgb + 4 shapes)");
  if (min_objects < 0 || max_objects < min_objects ||
      max_objects > kNumObjects)
    throw std::invalid_argument("synth.object count range invalid");
  if (max_run < 1 || max_run > grid_cols)
    throw std::invalid_argument("synth.max_run must be in [1, grid_cols]");
  if (p_negative < 0 || p_negative > 1 || p_empty < 0 || p_empty > 1)
    throw std::invalid_argument("synth probabilities must be in [0,1]");
  if (early_textual < 1 || early_textual > 2)
    throw std::invalid_argument("synth.early_textual must be 1 or 2");
  if (n_train <= 0 || n_val <= 0 || n_eval <= 0)
    throw std::invalid_argument("synth split sizes must be positive");
}

Matrix render_cells(const std::vector<ObjectSpan>& objects, int rows, int cols,
                    int feat_dim) {
  Matrix cells = Matrix::Zero(rows * cols, feat_dim);
  for (const auto& o : objects) {
    if (o.object_id < 0 || o.object_id >= kNumObjects)
      throw std::invalid_argument("render_cells: bad object id");
    for (int c : o.cells) {
      if (c < 0 || c >= rows * cols)
        throw std::invalid_argument("render_cells: cell out of range");
      cells(c, 0) = kPalette[o.object_id][0];
      cells(c, 1) = kPalette[o.object_id][1];
      cells(c, 2) = kPalette[o.object_id][2];
      cells(c, 3 + o.object_id % kNumShapes) = 1.0;
    }
  }
  return cells;
}

GridImage gen_image(const SynthConfig& cfg, Rng& rng) {
  GridImage img;
  img.rows = cfg.grid_rows;
  img.cols = cfg.grid_cols;

  int want = 0;
  if (rng.next_double() >= cfg.p_empty)
    want = cfg.min_objects + rand_below(rng, cfg.max_objects - cfg.min_objects + 1);

  // Distinct object types per image keep questions and captions unambiguous.
  std::vector<int> types(kNumObjects);
  std::iota(types.begin(), types.end(), 0);
  for (int i = kNumObjects - 1; i > 0; --i)
    std::swap(types[i], types[rand_below(rng, i + 1)]);

  std::vector<bool> occupied(img.n_cells(), false);
  for (int t = 0; t < want; ++t) {
    const int obj = types[t];
    for (int attempt = 0; attempt < 64; ++attempt) {
      const int len = 1 + rand_below(rng, cfg.max_run);
      const int row = rand_below(rng, img.rows);
      const int col = rand_below(rng, img.cols - len + 1);
      const int base = row * img.cols + col;
      bool free = true;
      for (int k = 0; k < len && free; ++k) free = !occupied[base + k];
      if (!free) continue;
      ObjectSpan span;
      span.object_id = obj;
      for (int k = 0; k < len; ++k) {
        span.cells.push_back(base + k);
        occupied[base + k] = true;
      }
      img.objects.push_back(std::move(span));
      break;
    }
  }
  img.cells = render_cells(img.objects, img.rows, img.cols, cfg.feat_dim);
  return img;
}

std::vector<int> make_question(const Vocab& v, int object_id) {
  if (object_id < 0 || object_id >= v.n_objects)
    throw std::invalid_argument("make_question: not an object id");
  return {v.is_, v.there_, v.a_, object_id, v.in_, v.the_, v.image_, v.qmark};
}

std::vector<int> make_caption(const GridImage& image, const Vocab& v) {
  std::vector<const ObjectSpan*> order;
  for (const auto& o : image.objects) order.push_back(&o);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return *std::min_element(a->cells.begin(), a->cells.end()) <
           *std::min_element(b->cells.begin(), b->cells.end());
  });
  std::vector<int> ids;
  if (order.empty()) {
    ids = {v.nothing, v.period};
  } else {
    for (const auto* o : order) {
      ids.push_back(v.a_);
      ids.push_back(o->object_id);
      ids.push_back(v.period);
    }
  }
  ids.push_back(v.stop);
  return ids;
}

std::vector<Category> annotate(const GridImage& image,
                               const std::vector<int>& question_ids,
                               int queried_object, const Vocab& vocab,
                               int early_textual) {
  const int n_vis = image.n_cells();
  const int n_txt = static_cast<int>(question_ids.size());
  std::vector<Category> cats(n_vis + n_txt, Category::Other);

  const ObjectSpan* span = image.find(queried_object);
  int lo = n_vis, hi = -1;
  if (span) {
    for (int c : span->cells) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
  }
  for (int i = 0; i < n_vis; ++i) {
    if (span && i >= lo && i <= hi)
      cats[i] = Category::ObjectVisual;
    else if (i < lo)
      cats[i] = Category::EarlyVisual;
    else
      cats[i] = Category::LateVisual;
  }
  if (!span)
    std::fill(cats.begin(), cats.begin() + n_vis, Category::EarlyVisual);

  for (int j = 0; j < n_txt; ++j) {
    const int pos = n_vis + j;
    if (j == n_txt - 1) {
      cats[pos] = Category::Last;
    } else if (j < early_textual) {
      cats[pos] = Category::EarlyTextual;
    } else if (question_ids[j] == queried_object) {
      cats[pos] = Category::TextualObject;
    } else if (question_ids[j] == vocab.a_) {
      cats[pos] = Category::Other;
    } else {
      cats[pos] = Category::LateTextual;
    }
  }
  return cats;
}

QASample gen_sample(const SynthConfig& cfg, const Vocab& vocab, Rng& rng,
                    const std::string& split) {
  QASample s;
  s.split = split;
  s.image = gen_image(cfg, rng);

  const bool want_negative =
      s.image.objects.empty() || rng.next_double() < cfg.p_negative;
  if (want_negative) {
    std::vector<int> absent;
    for (int t = 0; t < vocab.n_objects; ++t)
      if (!s.image.contains(t)) absent.push_back(t);
    // A full board leaves nothing absent; fall back to a positive query.
    if (!absent.empty()) {
      s.queried_object = absent[rand_below(rng, static_cast<int>(absent.size()))];
      s.answer_yes = false;
    }
  }
  if (s.queried_object < 0) {
    const int pick = rand_below(rng, static_cast<int>(s.image.objects.size()));
    s.queried_object = s.image.objects[pick].object_id;
    s.answer_yes = true;
  }

  s.question_ids = make_question(vocab, s.queried_object);
  s.categories = annotate(s.image, s.question_ids, s.queried_object, vocab,
                          cfg.early_textual);
  const ObjectSpan* span = s.image.find(s.queried_object);
  if (span) {
    auto [mn, mx] = std::minmax_element(span->cells.begin(), span->cells.end());
    s.contiguous_object =
        (*mx - *mn + 1) == static_cast<int>(span->cells.size());
  }
  s.caption_ids = make_caption(s.image, vocab);
  return s;
}

Dataset gen_dataset(const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  Dataset ds;
  ds.vocab = Vocab::standard();
  ds.config = cfg;
  const std::pair<const char*, int> splits[] = {
      {"train", cfg.n_train}, {"val", cfg.n_val}, {"eval", cfg.n_eval}};
  int split_idx = 0;
  for (const auto& [name, count] : splits) {
    Rng split_rng = rng.fork(split_idx++);
    for (int i = 0; i < count; ++i) {
      Rng sample_rng = split_rng.fork(i);
      ds.samples.push_back(gen_sample(cfg, ds.vocab, sample_rng, name));
    }
  }
  return ds;
}

std::vector<const QASample*> Dataset::split(const std::string& name) const {
  std::vector<const QASample*> out;
  for (const auto& s : samples)
    if (s.split == name) out.push_back(&s);
  return out;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  json header = {{"format", "crosstrace-dataset"},
                 {"version", 1},
                 {"vocab", ds.vocab.words},
                 {"n_objects", ds.vocab.n_objects},
                 {"grid_rows", ds.config.grid_rows},
                 {"grid_cols", ds.config.grid_cols},
                 {"feat_dim", ds.config.feat_dim},
                 {"early_textual", ds.config.early_textual},
                 {"n_samples", ds.samples.size()}};
  out << header.dump() << '\n';
  for (const auto& s : ds.samples) {
    json objs = json::array();
    for (const auto& o : s.image.objects)
      objs.push_back({{"id", o.object_id}, {"cells", o.cells}});
    json line = {{"split", s.split},
                 {"objects", objs},
                 {"query", s.queried_object},
                 {"answer", s.answer_yes}};
    out << line.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error(path.string() + ": empty dataset file");
  json header = json::parse(line);
  if (header.at("format").get<std::string>() != "crosstrace-dataset" ||
      header.at("version").get<int>() != 1)
    throw std::runtime_error(path.string() + ": unrecognized dataset header");

  Dataset ds;
  ds.vocab = Vocab::standard();
  if (header.at("vocab").get<std::vector<std::string>>() != ds.vocab.words)
    throw std::runtime_error(path.string() + ": vocab mismatch");
  ds.config.grid_rows = header.at("grid_rows").get<int>();
  ds.config.grid_cols = header.at("grid_cols").get<int>();
  ds.config.feat_dim = header.at("feat_dim").get<int>();
  ds.config.early_textual = header.at("early_textual").get<int>();

  size_t expected = header.at("n_samples").get<size_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    QASample s;
    s.split = j.at("split").get<std::string>();
    s.image.rows = ds.config.grid_rows;
    s.image.cols = ds.config.grid_cols;
    for (const auto& jo : j.at("objects")) {
      ObjectSpan o;
      o.object_id = jo.at("id").get<int>();
      o.cells = jo.at("cells").get<std::vector<int>>();
      s.image.objects.push_back(std::move(o));
    }
    s.image.cells = render_cells(s.image.objects, s.image.rows, s.image.cols,
                                 ds.config.feat_dim);
    s.queried_object = j.at("query").get<int>();
    s.answer_yes = j.at("answer").get<bool>();
    s.question_ids = make_question(ds.vocab, s.queried_object);
    s.categories = annotate(s.image, s.question_ids, s.queried_object,
                            ds.vocab, ds.config.early_textual);
    const ObjectSpan* span = s.image.find(s.queried_object);
    if (span) {
      auto [mn, mx] =
          std::minmax_element(span->cells.begin(), span->cells.end());
      s.contiguous_object =
          (*mx - *mn + 1) == static_cast<int>(span->cells.size());
    }
    s.caption_ids = make_caption(s.image, ds.vocab);
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.size() != expected)
    throw std::runtime_error(path.string() + ": sample count mismatch");
  return ds;
}

MultimodalSequence embed_qa(const Weights& w, const QASample& s) {
  return embed(w, s.image.cells, s.question_ids, s.categories);
}

}  // namespace crosstrace
