#include "cifa/io.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <unistd.h>

#ifndef CIFA_VERSION
#define CIFA_VERSION "0.0.0"
#endif

namespace cifa {

const char* version() { return CIFA_VERSION; }

namespace fs = std::filesystem;

namespace {

// Shortest text that reads back to the same double.
std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::optional<int> parse_int(const std::string& cell) {
  int value = 0;
  const char* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, value);
  if (ec != std::errc() || ptr != end || cell.empty()) return std::nullopt;
  return value;
}

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Json vector_to_json(const Vector& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

[[noreturn]] void fail(const std::string& pointer, const std::string& message) {
  throw FormatError((pointer.empty() ? std::string("/") : pointer) + ": " + message);
}

int get_int(const Json& doc, const std::string& pointer) {
  if (!doc.is_number_integer()) fail(pointer, "expected an integer");
  return doc.get<int>();
}

double get_number(const Json& doc, const std::string& pointer) {
  if (!doc.is_number()) fail(pointer, "expected a number");
  return doc.get<double>();
}

Vector vector_from_json(const Json& doc, const std::string& pointer) {
  if (!doc.is_array()) fail(pointer, "expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(doc.size()));
  for (std::size_t i = 0; i < doc.size(); ++i)
    v(static_cast<Eigen::Index>(i)) = get_number(doc[i], pointer + "/" + std::to_string(i));
  return v;
}

Matrix matrix_from_json(const Json& doc, const std::string& pointer, Eigen::Index rows,
                        Eigen::Index cols) {
  if (!doc.is_array() || static_cast<Eigen::Index>(doc.size()) != rows) {
    fail(pointer, "expected an array of " + std::to_string(rows) + " rows");
  }
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const std::string rp = pointer + "/" + std::to_string(r);
    const Json& row = doc[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      fail(rp, "expected " + std::to_string(cols) + " entries");
    }
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = get_number(row[static_cast<std::size_t>(c)], rp + "/" + std::to_string(c));
  }
  return m;
}

std::pair<int, int> factor_pair(const Json& doc, const std::string& pointer, int P) {
  if (!doc.is_array() || doc.size() != 2) fail(pointer, "expected a pair [p, q]");
  int a = get_int(doc[0], pointer + "/0"), b = get_int(doc[1], pointer + "/1");
  if (a < 0 || a >= P || b < 0 || b >= P) fail(pointer, "factor index out of range");
  if (a == b) fail(pointer, "a factor pair needs two different factors");
  return {std::max(a, b), std::min(a, b)};
}

CorrelationStructure parse_correlations(const Json* doc, int P) {
  const double half_pi = std::numbers::pi / 2.0;
  CorrelationStructure out;
  out.fixed = Matrix::Constant(P, P, half_pi);
  std::set<std::pair<int, int>> free;
  auto all_pairs = [&] {
    for (int r = 1; r < P; ++r)
      for (int c = 0; c < r; ++c) free.emplace(r, c);
  };
  const std::string base = "/correlations";
  if (doc == nullptr) {
    all_pairs();
  } else if (doc->is_string()) {
    const auto mode = doc->get<std::string>();
    if (mode == "free") {
      all_pairs();
    } else if (mode != "orthogonal") {
      fail(base, "expected \"free\", \"orthogonal\" or an object");
    }
  } else if (doc->is_object()) {
    for (auto it = doc->begin(); it != doc->end(); ++it) {
      if (it.key() != "free" && it.key() != "orthogonal" && it.key() != "zero" &&
          it.key() != "fixed") {
        fail(base + "/" + it.key(), "unknown key");
      }
    }
    const Json f = doc->value("free", Json("all"));
    if (f.is_string() && f.get<std::string>() == "all") {
      all_pairs();
    } else if (f.is_string() && f.get<std::string>() == "none") {
    } else if (f.is_array()) {
      for (std::size_t i = 0; i < f.size(); ++i)
        free.insert(factor_pair(f[i], base + "/free/" + std::to_string(i), P));
    } else {
      fail(base + "/free", "expected \"all\", \"none\" or a list of factor pairs");
    }
    if (doc->contains("orthogonal")) {
      const Json& o = (*doc)["orthogonal"];
      if (!o.is_array()) fail(base + "/orthogonal", "expected a list of factor indices");
      for (std::size_t i = 0; i < o.size(); ++i) {
        const std::string ptr = base + "/orthogonal/" + std::to_string(i);
        const int p = get_int(o[i], ptr);
        if (p < 0 || p >= P) fail(ptr, "factor index out of range");
        for (int q = 0; q < P; ++q) {
          if (q == p) continue;
          free.erase({std::max(p, q), std::min(p, q)});
        }
      }
    }
    if (doc->contains("fixed")) {
      const Json& fx = (*doc)["fixed"];
      if (!fx.is_array()) fail(base + "/fixed", "expected a list of [row, col, angle]");
      for (std::size_t i = 0; i < fx.size(); ++i) {
        const std::string ptr = base + "/fixed/" + std::to_string(i);
        if (!fx[i].is_array() || fx[i].size() != 3) fail(ptr, "expected [row, col, angle]");
        const int r = get_int(fx[i][0], ptr + "/0"), c = get_int(fx[i][1], ptr + "/1");
        const double a = get_number(fx[i][2], ptr + "/2");
        if (!(r > c && c >= 0 && r < P)) fail(ptr, "angle must be in the strict lower triangle");
        if (!(a > 0.0 && a <= std::numbers::pi)) fail(ptr + "/2", "angle outside (0, pi]");
        free.erase({r, c});
        out.fixed(r, c) = a;
      }
    }
    if (doc->contains("zero")) {
      const Json& z = (*doc)["zero"];
      if (!z.is_array()) fail(base + "/zero", "expected a list of factor pairs");
      std::vector<std::pair<std::pair<int, int>, std::string>> zeros;
      for (std::size_t i = 0; i < z.size(); ++i) {
        const std::string ptr = base + "/zero/" + std::to_string(i);
        auto pr = factor_pair(z[i], ptr, P);
        free.erase(pr);
        out.fixed(pr.first, pr.second) = half_pi;
        zeros.emplace_back(pr, ptr);
      }
      // sigma_{r,c} = 0 through the angles needs l_{r,0..c} = 0.
      for (const auto& [pr, ptr] : zeros) {
        for (int c = 0; c < pr.second; ++c) {
          if (free.count({pr.first, c}) || out.fixed(pr.first, c) != half_pi) {
            fail(ptr, "a zero correlation between factors " + std::to_string(pr.first) +
                          " and " + std::to_string(pr.second) + " also requires factor " +
                          std::to_string(pr.first) + " to be uncorrelated with factor " +
                          std::to_string(c) + "; reorder the factors");
          }
        }
      }
    }
  } else {
    fail(base, "expected \"free\", \"orthogonal\" or an object");
  }
  out.free.assign(free.begin(), free.end());
  return out;
}

LoadingEntry parse_entry(const Json& e, const std::string& pointer) {
  using Kind = LoadingEntry::Kind;
  if (e.is_number()) return {Kind::fixed, e.get<double>(), {}};
  if (e.is_string()) {
    const auto s = e.get<std::string>();
    if (s == "free" || s == "*") return {Kind::free, 0.0, {}};
    if (s.rfind("tie:", 0) == 0 && s.size() > 4) return {Kind::tied, 0.0, s.substr(4)};
  }
  fail(pointer, "expected \"free\", \"*\", a number or \"tie:<label>\"");
}

}  // namespace

// -- responses --------------------------------------------------------------------

ResponseMatrix parse_responses(std::istream& in, const ResponseLoadOptions& options,
                               const std::string& source) {
  std::vector<std::vector<int>> rows;
  std::string line;
  int line_no = 0;
  std::size_t width = 0;
  bool seen_first = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    std::vector<int> values;
    values.reserve(cells.size());
    std::size_t bad = cells.size();
    for (std::size_t c = 0; c < cells.size(); ++c) {
      auto v = parse_int(cells[c]);
      if (!v) {
        bad = c;
        break;
      }
      values.push_back(*v);
    }
    const bool first = !seen_first;
    seen_first = true;
    if (bad != cells.size()) {
      if (first) {
        width = cells.size();  // header
        continue;
      }
      throw FormatError(source + ":" + std::to_string(line_no) + ": column " +
                        std::to_string(bad + 1) + ": '" + cells[bad] + "' is not an integer");
    }
    if (width == 0) width = values.size();
    if (values.size() != width) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": " +
                        std::to_string(values.size()) + " cells, expected " +
                        std::to_string(width));
    }
    for (std::size_t c = 0; c < values.size(); ++c) {
      int& v = values[c];
      if (options.one_based) --v;
      const int K = options.categories && c < options.categories->size()
                        ? (*options.categories)[c]
                        : std::numeric_limits<int>::max();
      if (v < 0 || v >= K) {
        const int shown = options.one_based ? v + 1 : v;
        const int lo = options.one_based ? 1 : 0;
        throw FormatError(source + ":" + std::to_string(line_no) + ": column " +
                          std::to_string(c + 1) + ": code " + std::to_string(shown) +
                          (K == std::numeric_limits<int>::max()
                               ? " is negative"
                               : " outside " + std::to_string(lo) + ".." +
                                     std::to_string(lo + K - 1)));
      }
    }
    rows.push_back(std::move(values));
  }
  if (options.categories && width != 0 && width != options.categories->size()) {
    throw FormatError(source + ": " + std::to_string(width) + " columns but the spec has " +
                      std::to_string(options.categories->size()) + " items");
  }
  ResponseMatrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < width; ++c)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return out;
}

ResponseMatrix load_responses(const fs::path& path, const ResponseLoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_responses(in, options, path.string());
}

std::string format_responses(const ResponseMatrix& data, bool header) {
  std::ostringstream out;
  if (header) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) out << (j ? "," : "") << "item" << j + 1;
    out << '\n';
  }
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) out << (j ? "," : "") << data(i, j);
    out << '\n';
  }
  return out.str();
}

// -- model specs ------------------------------------------------------------------

ModelSpec parse_spec(const Json& doc, std::vector<std::string>* warnings) {
  if (!doc.is_object()) fail("", "a model spec must be a JSON object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    static const std::set<std::string> known{"items",       "categories",       "factors",
                                             "loadings",    "simple_structure", "constraints",
                                             "correlations"};
    if (!known.count(it.key())) fail("/" + it.key(), "unknown key");
  }
  if (!doc.contains("factors")) fail("/factors", "missing");
  const int P = get_int(doc["factors"], "/factors");
  if (P < 0) fail("/factors", "must be >= 0");

  if (!doc.contains("categories")) fail("/categories", "missing");
  std::vector<int> categories;
  const Json& cat = doc["categories"];
  if (cat.is_array()) {
    for (std::size_t j = 0; j < cat.size(); ++j)
      categories.push_back(get_int(cat[j], "/categories/" + std::to_string(j)));
    if (doc.contains("items") && get_int(doc["items"], "/items") != static_cast<int>(cat.size())) {
      fail("/items", "disagrees with the length of /categories");
    }
  } else {
    if (!doc.contains("items")) fail("/items", "required when /categories is a single number");
    const int J = get_int(doc["items"], "/items");
    if (J < 1) fail("/items", "must be >= 1");
    categories.assign(J, get_int(cat, "/categories"));
  }
  for (std::size_t j = 0; j < categories.size(); ++j) {
    if (categories[j] < 2) {
      fail(cat.is_array() ? "/categories/" + std::to_string(j) : "/categories",
           "items need at least 2 categories");
    }
  }
  if (categories.empty()) fail("/categories", "no items");
  const int J = static_cast<int>(categories.size());

  const int forms = doc.contains("loadings") + doc.contains("simple_structure") +
                    doc.contains("constraints");
  if (forms > 1) fail("", "give only one of loadings, simple_structure, constraints");
  if (P > 0 && forms == 0) fail("/loadings", "missing loading pattern");
  if (P == 0) {
    if (forms) fail("", "a zero-factor spec takes no loading pattern");
    return zero_factor_spec(categories);
  }

  CorrelationStructure corr =
      parse_correlations(doc.contains("correlations") ? &doc["correlations"] : nullptr, P);

  ModelSpec spec;
  try {
    if (doc.contains("simple_structure")) {
      const Json& ss = doc["simple_structure"];
      if (!ss.is_array() || static_cast<int>(ss.size()) != J) {
        fail("/simple_structure", "expected one factor index per item");
      }
      std::vector<std::vector<LoadingEntry>> pattern(J, std::vector<LoadingEntry>(P));
      for (int j = 0; j < J; ++j) {
        const std::string ptr = "/simple_structure/" + std::to_string(j);
        const int p = get_int(ss[j], ptr);
        if (p < 0 || p >= P) fail(ptr, "factor index out of range");
        pattern[j][p].kind = LoadingEntry::Kind::free;
      }
      spec = compile_loading_pattern(categories, P, pattern, corr);
    } else if (doc.contains("loadings")) {
      const Json& l = doc["loadings"];
      if (!l.is_array() || static_cast<int>(l.size()) != J) {
        fail("/loadings", "expected " + std::to_string(J) + " rows");
      }
      std::vector<std::vector<LoadingEntry>> pattern(J);
      for (int j = 0; j < J; ++j) {
        const std::string ptr = "/loadings/" + std::to_string(j);
        if (!l[j].is_array() || static_cast<int>(l[j].size()) != P) {
          fail(ptr, "expected " + std::to_string(P) + " entries");
        }
        for (int p = 0; p < P; ++p)
          pattern[j].push_back(parse_entry(l[j][p], ptr + "/" + std::to_string(p)));
      }
      spec = compile_loading_pattern(categories, P, pattern, corr);
    } else {
      const Json& c = doc["constraints"];
      if (!c.is_object()) fail("/constraints", "expected an object");
      if (!c.contains("free")) fail("/constraints/free", "missing");
      const int Q = get_int(c["free"], "/constraints/free");
      if (Q < 0) fail("/constraints/free", "must be >= 0");
      spec.categories = categories;
      spec.factors = P;
      spec.free_loadings = Q;
      spec.loading_offset = c.contains("offset")
                                ? matrix_from_json(c["offset"], "/constraints/offset", J, P)
                                : Matrix::Zero(J, P);
      if (!c.contains("maps") || !c["maps"].is_array() ||
          static_cast<int>(c["maps"].size()) != J) {
        fail("/constraints/maps", "expected one P x Q matrix per item");
      }
      for (int j = 0; j < J; ++j) {
        spec.loading_map.push_back(matrix_from_json(
            c["maps"][j], "/constraints/maps/" + std::to_string(j), P, Q));
      }
      spec.correlation = corr;
      spec.validate();
    }
  } catch (const std::invalid_argument& e) {
    fail("", e.what());
  }

  if (warnings) {
    for (int p = 0; p < P; ++p) {
      bool any = false;
      for (int j = 0; j < J && !any; ++j) any = spec.loading_map[j].row(p).any();
      if (!any) warnings->push_back("factor " + std::to_string(p) + " has no free loadings");
    }
  }
  return spec;
}

ModelSpec load_spec(const fs::path& path, std::vector<std::string>* warnings) {
  return parse_spec(read_json(path), warnings);
}

Json spec_to_json(const ModelSpec& spec) {
  Json doc;
  doc["categories"] = spec.categories;
  doc["factors"] = spec.factors;
  if (spec.factors == 0) return doc;
  Json maps = Json::array();
  for (const auto& A : spec.loading_map) maps.push_back(matrix_to_json(A));
  doc["constraints"] = {{"free", spec.free_loadings},
                        {"offset", matrix_to_json(spec.loading_offset)},
                        {"maps", maps}};
  Json free = Json::array(), fixed = Json::array();
  std::set<std::pair<int, int>> is_free;
  for (auto [r, c] : spec.correlation.free) {
    free.push_back({r, c});
    is_free.emplace(r, c);
  }
  for (int r = 1; r < spec.factors; ++r)
    for (int c = 0; c < r; ++c)
      if (!is_free.count({r, c})) fixed.push_back({r, c, spec.correlation.fixed(r, c)});
  doc["correlations"] = {{"free", free}, {"fixed", fixed}};
  return doc;
}

// -- parameters and estimates --------------------------------------------------------

Json params_to_json(const ParameterSet& params) {
  return {{"intercepts", vector_to_json(params.intercepts)},
          {"loadings", vector_to_json(params.loadings)},
          {"angles", vector_to_json(params.angles)}};
}

ParameterSet params_from_json(const ModelSpec& spec, const Json& doc) {
  if (!doc.is_object()) fail("/parameters", "expected an object");
  auto field = [&](const char* key, Eigen::Index expected) {
    const std::string ptr = std::string("/parameters/") + key;
    if (!doc.contains(key)) fail(ptr, "missing");
    Vector v = vector_from_json(doc[key], ptr);
    if (v.size() != expected) {
      fail(ptr, "has " + std::to_string(v.size()) + " values, expected " +
                    std::to_string(expected));
    }
    return v;
  };
  return {field("intercepts", spec.intercept_count()), field("loadings", spec.free_loadings),
          field("angles", static_cast<Eigen::Index>(spec.correlation.free.size()))};
}

Json model_to_json(const Model& model) {
  Json intercepts = Json::array();
  for (const auto& a : model.intercepts) intercepts.push_back(vector_to_json(a));
  return {{"intercepts", intercepts},
          {"loadings", matrix_to_json(model.loadings)},
          {"correlation", matrix_to_json(model.correlation.sigma)}};
}

ParameterSet params_from_model_json(const ModelSpec& spec, const Json& doc) {
  const int J = spec.items(), P = spec.factors;
  if (!doc.is_object()) fail("", "expected an object");
  if (!doc.contains("intercepts") || !doc["intercepts"].is_array() ||
      static_cast<int>(doc["intercepts"].size()) != J) {
    fail("/intercepts", "expected one intercept list per item");
  }
  ParameterSet params;
  params.intercepts.resize(spec.intercept_count());
  const auto offsets = spec.intercept_offsets();
  for (int j = 0; j < J; ++j) {
    const std::string ptr = "/intercepts/" + std::to_string(j);
    const Vector alpha = vector_from_json(doc["intercepts"][j], ptr);
    if (alpha.size() != spec.categories[j] - 1) {
      fail(ptr, "expected " + std::to_string(spec.categories[j] - 1) + " intercepts");
    }
    for (Eigen::Index k = 1; k < alpha.size(); ++k)
      if (!(alpha(k) > alpha(k - 1))) fail(ptr, "intercepts must be strictly increasing");
    params.intercepts.segment(offsets[j], alpha.size()) = raw_from_intercepts(alpha);
  }
  const Matrix loadings = P == 0 ? Matrix(J, 0)
                                 : matrix_from_json(doc.value("loadings", Json()), "/loadings", J, P);
  try {
    params.loadings = free_loadings_from(spec, loadings);
  } catch (const std::invalid_argument& e) {
    fail("/loadings", e.what());
  }
  const Matrix sigma = P == 0 ? Matrix(0, 0)
                              : matrix_from_json(doc.value("correlation", Json()),
                                                 "/correlation", P, P);
  params.angles.resize(static_cast<Eigen::Index>(spec.correlation.free.size()));
  if (P > 0) {
    Matrix theta;
    try {
      theta = angles_from_correlation(sigma).theta;
    } catch (const std::exception& e) {
      fail("/correlation", e.what());
    }
    for (std::size_t i = 0; i < spec.correlation.free.size(); ++i) {
      const auto [r, c] = spec.correlation.free[i];
      params.angles(static_cast<Eigen::Index>(i)) = theta(r, c);
    }
    const Matrix rebuilt = materialize(spec, params).correlation.sigma;
    if ((rebuilt - sigma).cwiseAbs().maxCoeff() > 1e-8) {
      fail("/correlation", "not representable with the spec's fixed correlations");
    }
  }
  return params;
}

Json net_to_json(const InferenceNet& net) {
  return {{"architecture",
           {{"input", "one-hot"},
            {"activation", "elu"},
            {"categories", net.categories()},
            {"factors", net.factors()},
            {"hidden", net.hidden()}}},
          {"parameters", vector_to_json(net.parameters())}};
}

InferenceNet net_from_json(const Json& doc) {
  if (!doc.is_object() || !doc.contains("architecture") || !doc.contains("parameters")) {
    fail("/net", "expected architecture and parameters");
  }
  const Json& a = doc["architecture"];
  InferenceNet net;
  try {
    net = InferenceNet(a.at("categories").get<std::vector<int>>(), a.at("factors").get<int>(),
                       a.at("hidden").get<std::vector<int>>());
  } catch (const Json::exception& e) {
    fail("/net/architecture", e.what());
  } catch (const std::invalid_argument& e) {
    fail("/net/architecture", e.what());
  }
  Vector p = vector_from_json(doc["parameters"], "/net/parameters");
  if (p.size() != net.parameter_count()) {
    fail("/net/parameters", "has " + std::to_string(p.size()) + " values, architecture needs " +
                                std::to_string(net.parameter_count()));
  }
  net.parameters() = p;
  return net;
}

Json estimates_to_json(const Estimates& est) {
  Json doc;
  doc["format"] = "cifa-estimates";
  doc["version"] = version();
  doc["spec"] = spec_to_json(est.spec);
  doc["parameters"] = params_to_json(est.params);
  doc["model"] = model_to_json(est.model());
  if (est.net) doc["net"] = net_to_json(*est.net);
  doc["fit"] = est.fit.is_null() ? Json::object() : est.fit;
  return doc;
}

Estimates estimates_from_json(const Json& doc) {
  if (!doc.is_object() || doc.value("format", "") != "cifa-estimates") {
    fail("/format", "not an estimates document");
  }
  if (!doc.contains("spec")) fail("/spec", "missing");
  Estimates est;
  est.spec = parse_spec(doc["spec"]);
  est.params = doc.contains("parameters") ? params_from_json(est.spec, doc["parameters"])
                                          : (fail("/parameters", "missing"), ParameterSet{});
  if (doc.contains("net")) est.net = net_from_json(doc["net"]);
  est.fit = doc.value("fit", Json::object());
  return est;
}

Estimates load_estimates(const fs::path& path) { return estimates_from_json(read_json(path)); }

Estimates estimates_from_fit(const ModelSpec& spec, const FitResult& result) {
  Estimates est{spec, result.params, result.net, Json::object()};
  est.fit = {{"steps", result.steps},
             {"converged", result.converged},
             {"skipped_steps", result.skipped_steps},
             {"seconds", result.seconds},
             {"free_parameters", result.free_parameters},
             {"final_batch_iw_elbo", result.trace.empty() ? Json() : Json(result.trace.back())}};
  return est;
}

std::string format_trace(const std::vector<double>& trace) {
  std::ostringstream out;
  out << "step,iw_elbo\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i + 1 << ',' << num(trace[i]) << '\n';
  return out.str();
}

// -- persistence ------------------------------------------------------------------------

void write_atomic(const fs::path& path, const std::string& content) {
  static std::atomic<unsigned> counter{0};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw std::runtime_error("cannot rename onto " + path.string() + ": " + ec.message());
  }
}

std::string dump_json(const Json& doc) { return doc.dump(2) + "\n"; }

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Json manifest_to_json(const Manifest& m) {
  return {{"command", m.command}, {"argv", m.argv},       {"config", m.config},
          {"seeds", m.seeds},     {"version", version()}, {"started", m.started},
          {"finished", m.finished}, {"outputs", m.outputs}};
}

Manifest manifest_from_json(const Json& doc) {
  Manifest m;
  try {
    m.command = doc.at("command").get<std::string>();
    m.argv = doc.at("argv").get<std::vector<std::string>>();
    m.config = doc.value("config", Json::object());
    m.seeds = doc.value("seeds", Json::object());
    m.started = doc.value("started", "");
    m.finished = doc.value("finished", "");
    m.outputs = doc.value("outputs", std::vector<std::string>{});
  } catch (const Json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<fs::path> save_results(const fs::path& dir, const ModelSpec& spec,
                                   const FitResult& result) {
  const fs::path est = dir / "estimates.json", trace = dir / "trace.csv";
  write_atomic(est, dump_json(estimates_to_json(estimates_from_fit(spec, result))));
  write_atomic(trace, format_trace(result.trace));
  return {est, trace};
}

// -- study reports ------------------------------------------------------------------

Json report_to_json(const RecoveryReport& report) {
  Json doc;
  doc["study"] = "recovery";
  Json params = Json::array();
  for (const auto& p : report.parameters) params.push_back({{"name", p.name}, {"truth", p.truth}});
  doc["parameters"] = params;
  Json cells = Json::array();
  for (const auto& c : report.cells) {
    Json ps = Json::array();
    for (const auto& p : c.parameters)
      ps.push_back({{"name", p.name}, {"truth", p.truth}, {"bias", p.bias}, {"mse", p.mse}});
    cells.push_back({{"n", c.cell.n},
                     {"iw_samples", c.cell.iw_samples},
                     {"completed", c.completed},
                     {"failures", c.failures},
                     {"flagged", c.flagged},
                     {"mean_seconds", c.mean_seconds},
                     {"parameters", ps}});
  }
  doc["cells"] = cells;
  Json records = Json::array();
  for (const auto& r : report.records) {
    records.push_back({{"cell", r.cell},
                       {"replication", r.replication},
                       {"seed", r.seed},
                       {"estimate", vector_to_json(r.estimate)},
                       {"final_elbo", r.final_elbo},
                       {"elbo_se", r.elbo_se},
                       {"steps", r.steps},
                       {"converged", r.converged},
                       {"flagged", r.flagged},
                       {"refitted", r.refitted},
                       {"seconds", r.seconds},
                       {"error", r.error}});
  }
  doc["records"] = records;
  return doc;
}

Json report_to_json(const CalibrationReport& report) {
  Json doc;
  doc["study"] = "uniform_calibration";
  Json cells = Json::array();
  for (const auto& c : report.cells) {
    cells.push_back({{"shift", c.arm.shift},
                     {"epsilon", c.arm.epsilon},
                     {"n", c.n},
                     {"classifier", to_string(c.classifier)},
                     {"rejection_rate", c.rejection_rate},
                     {"mean_accuracy", c.mean_accuracy},
                     {"predicted_power", c.predicted_power},
                     {"replications", c.replications}});
  }
  doc["cells"] = cells;
  Json records = Json::array();
  for (const auto& r : report.records) {
    records.push_back({{"arm", r.arm},
                       {"n", r.n},
                       {"classifier", to_string(r.classifier)},
                       {"replication", r.replication},
                       {"accuracy", r.accuracy},
                       {"p_value", r.p_value},
                       {"reject", r.reject},
                       {"seconds", r.seconds}});
  }
  doc["records"] = records;
  return doc;
}

Json report_to_json(const MisspecReport& report, const MisspecConfig& config) {
  Json doc;
  doc["study"] = "misspecification";
  doc["deltas"] = config.deltas;
  doc["flagged_items"] = config.flagged_items;
  Json cells = Json::array();
  for (const auto& c : report.cells) {
    cells.push_back({{"variant", c.variant},
                     {"n", c.n},
                     {"classifier", to_string(c.classifier)},
                     {"rejection_rates", c.rejection_rates},
                     {"mean_accuracy", c.mean_accuracy},
                     {"median_rfi", c.median_rfi},
                     {"top_hit_rate", c.top_hit_rate},
                     {"mean_importance", vector_to_json(c.mean_importance)},
                     {"completed", c.completed},
                     {"failures", c.failures}});
  }
  doc["cells"] = cells;
  Json records = Json::array();
  for (const auto& r : report.records) {
    records.push_back({{"variant", config.variants.at(r.variant).name},
                       {"n", r.n},
                       {"classifier", to_string(r.classifier)},
                       {"replication", r.replication},
                       {"accuracy", r.accuracy},
                       {"p_values", r.p_values},
                       {"baseline_accuracy", r.baseline_accuracy},
                       {"rfi", r.rfi_defined ? Json(r.rfi) : Json()},
                       {"importance", vector_to_json(r.importance)},
                       {"top_hit", r.top_hit},
                       {"flagged_fit", r.flagged_fit},
                       {"error", r.error}});
  }
  doc["records"] = records;
  return doc;
}

std::string report_to_csv(const RecoveryReport& report) {
  std::ostringstream out;
  out << "n,iw_samples,parameter,truth,bias,mse\n";
  for (const auto& c : report.cells)
    for (const auto& p : c.parameters)
      out << c.cell.n << ',' << c.cell.iw_samples << ',' << p.name << ',' << num(p.truth) << ','
          << num(p.bias) << ',' << num(p.mse) << '\n';
  return out.str();
}

std::string report_to_csv(const CalibrationReport& report) {
  std::ostringstream out;
  out << "shift,epsilon,n,classifier,quantity,value\n";
  for (const auto& c : report.cells) {
    const std::string prefix = num(c.arm.shift) + ',' + num(c.arm.epsilon) + ',' +
                               std::to_string(c.n) + ',' + to_string(c.classifier);
    out << prefix << ",rejection_rate," << num(c.rejection_rate) << '\n'
        << prefix << ",mean_accuracy," << num(c.mean_accuracy) << '\n'
        << prefix << ",predicted_power," << num(c.predicted_power) << '\n';
  }
  return out.str();
}

std::string report_to_csv(const MisspecReport& report, const MisspecConfig& config) {
  std::ostringstream out;
  out << "variant,n,classifier,quantity,value\n";
  for (const auto& c : report.cells) {
    const std::string prefix =
        c.variant + ',' + std::to_string(c.n) + ',' + to_string(c.classifier) + ',';
    for (std::size_t d = 0; d < config.deltas.size(); ++d)
      out << prefix << "rejection_rate[delta=" << num(config.deltas[d]) << "],"
          << num(c.rejection_rates[d]) << '\n';
    out << prefix << "mean_accuracy," << num(c.mean_accuracy) << '\n';
    out << prefix << "median_rfi," << num(c.median_rfi) << '\n';
    out << prefix << "top_hit_rate," << num(c.top_hit_rate) << '\n';
    for (Eigen::Index j = 0; j < c.mean_importance.size(); ++j)
      out << prefix << "importance[" << j << "]," << num(c.mean_importance(j)) << '\n';
  }
  return out.str();
}

}  // namespace cifa
