#pragma once

// Synthetic vision-language tasks over a small unified vocabulary.
//
// An "image" is a g x g grid of cell tokens: EMPTY or one of 16 objects
// (4 shapes x 4 colours). Two tasks:
//   entail  - the text "there is a <A> and|or no <B>" makes a claim about
//             shapes A and B; the answer token is YES or NO.
//   caption - the text is a fixed instruction; the answer lists the grid's
//             objects in row-major order.
//
// Dataset files hold one example per line:
//   <task> <grid ids...> | <text ids...> | <target ids...>
// with task 0 = entail, 1 = caption, all fields space-separated integers.

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mue/model.hpp"
#include "mue/numerics.hpp"

namespace mue {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Task { kEntail = 0, kCaption = 1 };

inline const char* task_name(Task t) { return t == Task::kEntail ? "entail" : "caption"; }

inline Task parse_task(const std::string& s) {
  if (s == "entail") return Task::kEntail;
  if (s == "caption") return Task::kCaption;
  throw ContractError("unknown task '" + s + "' (expected entail or caption)");
}

namespace vocab {
constexpr TokenId kYes = 3;
constexpr TokenId kNo = 4;
constexpr TokenId kEmpty = 5;
constexpr TokenId kDescribe = 6;
constexpr TokenId kThe = 7;
constexpr TokenId kImage = 8;
constexpr TokenId kThere = 9;
constexpr TokenId kIs = 10;
constexpr TokenId kA = 11;
constexpr TokenId kAnd = 12;
constexpr TokenId kNone = 13;  // the word "no", distinct from the label NO
constexpr TokenId kOr = 14;
constexpr TokenId kObjectBase = 16;  // 16 + 4*shape + colour
constexpr TokenId kShapeWordBase = 32;
constexpr int kShapes = 4;
constexpr int kColours = 4;
constexpr std::size_t kMinVocab = 36;

inline TokenId object(int shape, int colour) { return kObjectBase + 4 * shape + colour; }
inline bool is_object(TokenId t) { return t >= kObjectBase && t < kObjectBase + kShapes * kColours; }
inline int shape_of(TokenId obj) { return (obj - kObjectBase) / 4; }
inline TokenId shape_word(int shape) { return kShapeWordBase + shape; }
inline bool is_shape_word(TokenId t) { return t >= kShapeWordBase && t < kShapeWordBase + kShapes; }

inline std::string name(TokenId t) {
  static const char* shapes[] = {"circle", "square", "triangle", "star"};
  static const char* colours[] = {"red", "green", "blue", "yellow"};
  switch (t) {
    case tokens::kBos: return "<bos>";
    case tokens::kEos: return "<eos>";
    case tokens::kPad: return "<pad>";
    case kYes: return "YES";
    case kNo: return "NO";
    case kEmpty: return "empty";
    case kDescribe: return "describe";
    case kThe: return "the";
    case kImage: return "image";
    case kThere: return "there";
    case kIs: return "is";
    case kA: return "a";
    case kAnd: return "and";
    case kNone: return "no";
    case kOr: return "or";
    default: break;
  }
  if (is_object(t)) {
    return std::string(colours[(t - kObjectBase) % 4]) + "-" + shapes[shape_of(t)];
  }
  if (is_shape_word(t)) return shapes[t - kShapeWordBase];
  return "<" + std::to_string(t) + ">";
}
}  // namespace vocab

struct SyntheticExample {
  Task task = Task::kEntail;
  std::vector<TokenId> grid;
  std::vector<TokenId> text;
  std::vector<TokenId> target;  // ends with EOS

  bool operator==(const SyntheticExample&) const = default;
};

inline std::string detokenize(std::span<const TokenId> ids) {
  std::string out;
  for (TokenId t : ids) {
    if (!out.empty()) out += ' ';
    out += vocab::name(t);
  }
  return out;
}

/// The number of objects of `shape` in a grid.
inline int count_shape(std::span<const TokenId> grid, int shape) {
  return static_cast<int>(std::count_if(grid.begin(), grid.end(), [shape](TokenId t) {
    return vocab::is_object(t) && vocab::shape_of(t) == shape;
  }));
}

/// Caption rule: the grid's objects in row-major order, then EOS.
inline std::vector<TokenId> caption_for(std::span<const TokenId> grid) {
  std::vector<TokenId> out;
  for (TokenId t : grid)
    if (vocab::is_object(t)) out.push_back(t);
  out.push_back(tokens::kEos);
  return out;
}

/// Entail rule: "there is a <A> and no <B>" holds iff the grid contains an A
/// and no B; "there is a <A> or no <B>" holds iff it contains an A or no B.
/// With A = B these are a contradiction and a tautology.
inline std::vector<TokenId> entail_target(std::span<const TokenId> grid, std::span<const TokenId> text) {
  if (text.size() != 7 || text[0] != vocab::kThere || text[1] != vocab::kIs || text[2] != vocab::kA ||
      !vocab::is_shape_word(text[3]) || (text[4] != vocab::kAnd && text[4] != vocab::kOr) ||
      text[5] != vocab::kNone || !vocab::is_shape_word(text[6])) {
    throw ContractError("entail_target: malformed statement");
  }
  const bool has_a = count_shape(grid, text[3] - vocab::kShapeWordBase) >= 1;
  const bool lacks_b = count_shape(grid, text[6] - vocab::kShapeWordBase) == 0;
  const bool holds = text[4] == vocab::kAnd ? has_a && lacks_b : has_a || lacks_b;
  return {holds ? vocab::kYes : vocab::kNo, tokens::kEos};
}

struct GeneratorOptions {
  std::size_t grid_side = 4;
  int min_objects = 1;
  int max_objects = 3;
};

inline GeneratorOptions default_generator(Task task, std::size_t grid_side) {
  return task == Task::kEntail ? GeneratorOptions{grid_side, 1, 1} : GeneratorOptions{grid_side, 1, 3};
}

/// One example. Entail grids hold one random object and get an and/or
/// statement about two shapes. Caption grids hold distinct
/// objects placed so that row-major order is also ascending token order.
inline SyntheticExample generate_example(SeededRng& rng, Task task, const GeneratorOptions& opt) {
  const std::size_t cells = opt.grid_side * opt.grid_side;
  SyntheticExample ex;
  ex.task = task;
  ex.grid.assign(cells, vocab::kEmpty);
  const int span = opt.max_objects - opt.min_objects + 1;
  const int n_obj = std::min<int>(opt.min_objects + static_cast<int>(rng.below(static_cast<std::uint64_t>(span))),
                                  static_cast<int>(cells));

  std::vector<std::size_t> positions(cells);
  for (std::size_t i = 0; i < cells; ++i) positions[i] = i;
  rng.shuffle(positions);
  positions.resize(static_cast<std::size_t>(n_obj));

  if (task == Task::kCaption) {
    std::vector<TokenId> objects(vocab::kShapes * vocab::kColours);
    for (std::size_t i = 0; i < objects.size(); ++i) objects[i] = vocab::kObjectBase + static_cast<TokenId>(i);
    rng.shuffle(objects);
    objects.resize(static_cast<std::size_t>(n_obj));
    std::sort(objects.begin(), objects.end());
    std::sort(positions.begin(), positions.end());
    for (std::size_t i = 0; i < positions.size(); ++i) ex.grid[positions[i]] = objects[i];
    ex.text = {vocab::kDescribe, vocab::kThe, vocab::kImage};
    ex.target = caption_for(ex.grid);
    return ex;
  }

  for (std::size_t p : positions) {
    ex.grid[p] = vocab::object(static_cast<int>(rng.below(vocab::kShapes)),
                               static_cast<int>(rng.below(vocab::kColours)));
  }
  // two statements in three name one shape twice and are settled by the text alone
  const int a = static_cast<int>(rng.below(vocab::kShapes));
  int b = a;
  if (rng.below(3) == 0) b = (a + 1 + static_cast<int>(rng.below(vocab::kShapes - 1))) % vocab::kShapes;
  const TokenId conj = rng.below(2) == 0 ? vocab::kAnd : vocab::kOr;
  ex.text = {vocab::kThere, vocab::kIs, vocab::kA, vocab::shape_word(a), conj, vocab::kNone, vocab::shape_word(b)};
  ex.target = entail_target(ex.grid, ex.text);
  return ex;
}

inline std::vector<SyntheticExample> generate_dataset(std::uint64_t seed, std::size_t count, Task task,
                                                      std::size_t grid_side) {
  if (count < 1) throw ContractError("generate_dataset: count must be >= 1");
  SeededRng rng(seed);
  const GeneratorOptions opt = default_generator(task, grid_side);
  std::vector<SyntheticExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_example(rng, task, opt));
  return out;
}

inline std::string serialize_example(const SyntheticExample& ex) {
  std::ostringstream os;
  os << static_cast<int>(ex.task);
  for (TokenId t : ex.grid) os << ' ' << t;
  os << " |";
  for (TokenId t : ex.text) os << ' ' << t;
  os << " |";
  for (TokenId t : ex.target) os << ' ' << t;
  return os.str();
}

inline SyntheticExample parse_example(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::vector<TokenId>> fields(1);
  std::string word;
  while (is >> word) {
    if (word == "|") {
      fields.emplace_back();
      continue;
    }
    try {
      std::size_t used = 0;
      const long v = std::stol(word, &used);
      if (used != word.size()) throw std::invalid_argument(word);
      fields.back().push_back(static_cast<TokenId>(v));
    } catch (const std::exception&) {
      throw ParseError("dataset line: '" + word + "' is not an integer");
    }
  }
  if (fields.size() != 3 || fields[0].empty()) {
    throw ParseError("dataset line: expected 'task grid... | text... | target...'");
  }
  SyntheticExample ex;
  const TokenId task = fields[0].front();
  if (task != 0 && task != 1) throw ParseError("dataset line: task must be 0 or 1");
  ex.task = static_cast<Task>(task);
  ex.grid.assign(fields[0].begin() + 1, fields[0].end());
  ex.text = std::move(fields[1]);
  ex.target = std::move(fields[2]);
  return ex;
}

inline void write_dataset(const std::string& path, const std::vector<SyntheticExample>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset to '" + path + "'");
  for (const auto& ex : data) out << serialize_example(ex) << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::vector<SyntheticExample> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read dataset '" + path + "'");
  std::vector<SyntheticExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_example(line));
  }
  return out;
}

}  // namespace mue
