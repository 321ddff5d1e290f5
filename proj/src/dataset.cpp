#include "convrec/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <unordered_map>

#include "convrec/errors.hpp"
#include "convrec/numerics.hpp"

namespace convrec {

int RatingScale::index_of(double v) const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (std::abs(values[i] - v) <= 1e-9) return static_cast<int>(i + 1);
  }
  return 0;
}

void RatingScale::validate() const {
  if (values.size() < 2) throw data_error("rating scale needs at least 2 values");
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (!(values[i] > values[i - 1])) {
      throw data_error("rating scale values must be strictly increasing");
    }
  }
}

RatingScale RatingScale::integers(int k) {
  RatingScale s;
  for (int i = 1; i <= k; ++i) s.values.push_back(static_cast<double>(i));
  return s;
}

void SplitSpec::validate() const {
  if (train_fraction <= 0 || validation_fraction <= 0 || test_fraction <= 0) {
    throw usage_error("split fractions must be positive");
  }
  const double sum = train_fraction + validation_fraction + test_fraction;
  if (std::abs(sum - 1.0) > 1e-12) {
    throw usage_error("split fractions must sum to 1");
  }
}

int UserSlice::rating_index_of(std::int32_t item) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), item,
                             [](const auto& e, std::int32_t v) { return e.first < v; });
  if (it != entries.end() && it->first == item) return it->second;
  return 0;
}

void ObservedDataset::finalize() {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(m) + 1, 0);
  for (const Triple& t : triples) counts[static_cast<std::size_t>(t.user)]++;
  user_start_.assign(static_cast<std::size_t>(m) + 1, 0);
  for (std::int64_t u = 1; u <= m; ++u) {
    user_start_[static_cast<std::size_t>(u)] =
        user_start_[static_cast<std::size_t>(u - 1)] + counts[static_cast<std::size_t>(u)];
  }
  user_items_.assign(triples.size(), {});
  std::vector<std::int64_t> cursor(user_start_.begin(), user_start_.end() - 1);
  for (const Triple& t : triples) {
    user_items_[static_cast<std::size_t>(cursor[static_cast<std::size_t>(t.user - 1)]++)] = {
        t.item, t.rating_index};
  }
  for (std::int64_t u = 0; u < m; ++u) {
    auto begin = user_items_.begin() + user_start_[static_cast<std::size_t>(u)];
    auto end = user_items_.begin() + user_start_[static_cast<std::size_t>(u + 1)];
    std::sort(begin, end);
  }
}

UserSlice ObservedDataset::user_slice(std::int32_t user) const {
  if (user < 1 || user > m) {
    throw usage_error("user index " + std::to_string(user) + " out of range [1," +
                      std::to_string(m) + "]");
  }
  if (user_start_.size() != static_cast<std::size_t>(m) + 1) {
    throw usage_error("dataset not finalized");
  }
  UserSlice s;
  s.user = user;
  s.entries.assign(user_items_.begin() + user_start_[static_cast<std::size_t>(user - 1)],
                   user_items_.begin() + user_start_[static_cast<std::size_t>(user)]);
  return s;
}

bool ObservedDataset::user_has_observations(std::int32_t user) const {
  if (user < 1 || user > m) return false;
  return user_start_[static_cast<std::size_t>(user)] >
         user_start_[static_cast<std::size_t>(user - 1)];
}

std::int32_t ObservedDataset::user_index_of(const std::string& external_id) const {
  for (std::size_t i = 0; i < user_ids.size(); ++i) {
    if (user_ids[i] == external_id) return static_cast<std::int32_t>(i + 1);
  }
  return 0;
}

std::int32_t ObservedDataset::item_index_of(const std::string& external_id) const {
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    if (item_ids[i] == external_id) return static_cast<std::int32_t>(i + 1);
  }
  return 0;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const char* begin = t.data();
  const char* end = begin + t.size();
  auto res = std::from_chars(begin, end, out);
  return res.ec == std::errc() && res.ptr == end;
}

std::vector<std::string> split_fields(const std::string& line, const std::string& delim) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = line.find(delim, pos);
    if (next == std::string::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + delim.size();
  }
  return out;
}

std::string detect_delimiter(const std::string& line) {
  if (line.find("::") != std::string::npos) return "::";
  if (line.find('\t') != std::string::npos) return "\t";
  if (line.find(',') != std::string::npos) return ",";
  return "";
}

}  // namespace

ObservedDataset load_ratings(const std::string& path, const RatingScale& scale) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open ratings file: " + path);

  ObservedDataset ds;
  const bool explicit_scale = !scale.values.empty();
  if (explicit_scale) {
    scale.validate();
    ds.scale = scale;
  }

  std::unordered_map<std::string, std::int32_t> user_index, item_index;
  std::unordered_map<std::int64_t, std::int64_t> seen_pairs;  // (u,i) -> line number
  struct RawTriple {
    std::int32_t user, item;
    double rating;
  };
  std::vector<RawTriple> raw;

  std::string line;
  std::string delim;
  std::int64_t line_no = 0;
  bool first_content_line = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (delim.empty()) {
      delim = detect_delimiter(line);
      if (delim.empty()) {
        throw data_error("line " + std::to_string(line_no) +
                         ": no recognized delimiter (tab, comma or ::)");
      }
    }
    auto fields = split_fields(line, delim);
    if (first_content_line) {
      first_content_line = false;
      double probe;
      if (fields.size() >= 3 && !parse_double(fields[2], probe)) {
        continue;  // header row
      }
    }
    if (fields.size() < 3) {
      throw data_error("line " + std::to_string(line_no) + ": expected user" + delim + "item" +
                       delim + "rating");
    }
    const std::string user_id = trim(fields[0]);
    const std::string item_id = trim(fields[1]);
    double rating;
    if (user_id.empty() || item_id.empty() || !parse_double(fields[2], rating)) {
      throw data_error("line " + std::to_string(line_no) + ": malformed record");
    }
    if (explicit_scale && ds.scale.index_of(rating) == 0) {
      throw data_error("line " + std::to_string(line_no) + ": rating " +
                       std::to_string(rating) + " is not on the scale");
    }

    auto [uit, uinserted] = user_index.try_emplace(
        user_id, static_cast<std::int32_t>(user_index.size() + 1));
    if (uinserted) ds.user_ids.push_back(user_id);
    auto [iit, iinserted] = item_index.try_emplace(
        item_id, static_cast<std::int32_t>(item_index.size() + 1));
    if (iinserted) ds.item_ids.push_back(item_id);

    const std::int32_t u = uit->second;
    const std::int32_t i = iit->second;
    const std::int64_t key = (static_cast<std::int64_t>(u) << 32) | static_cast<std::int64_t>(i);
    auto [pit, pinserted] = seen_pairs.try_emplace(key, line_no);
    if (!pinserted) {
      throw data_error("duplicate (user,item) pair '" + user_id + "','" + item_id +
                       "' at lines " + std::to_string(pit->second) + " and " +
                       std::to_string(line_no));
    }
    raw.push_back({u, i, rating});
  }

  if (!explicit_scale) {
    std::set<double> distinct;
    for (const RawTriple& t : raw) distinct.insert(t.rating);
    ds.scale.values.assign(distinct.begin(), distinct.end());
    if (!raw.empty()) ds.scale.validate();
  }

  ds.m = static_cast<std::int64_t>(ds.user_ids.size());
  ds.n = static_cast<std::int64_t>(ds.item_ids.size());
  ds.triples.reserve(raw.size());
  for (const RawTriple& t : raw) {
    const int kappa = ds.scale.index_of(t.rating);
    if (kappa == 0) throw data_error("internal: rating dropped from derived scale");
    ds.triples.push_back({t.user, t.item, kappa});
  }
  ds.finalize();
  return ds;
}

SplitResult split(const ObservedDataset& data, const SplitSpec& spec) {
  spec.validate();
  const std::int64_t total = data.size();
  if (total < 3) throw data_error("split needs at least 3 observations");

  const auto part1 = static_cast<std::int64_t>(std::llround(spec.train_fraction * total));
  const auto part2 = static_cast<std::int64_t>(std::llround(spec.validation_fraction * total));
  const std::int64_t part3 = total - part1 - part2;
  if (part1 <= 0 || part2 <= 0 || part3 <= 0) {
    throw data_error("split would produce an empty part for N=" + std::to_string(total));
  }

  std::vector<std::int64_t> order(static_cast<std::size_t>(total));
  for (std::int64_t i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);

  auto make_part = [&](std::int64_t begin, std::int64_t count) {
    ObservedDataset part;
    part.m = data.m;
    part.n = data.n;
    part.scale = data.scale;
    part.user_ids = data.user_ids;
    part.item_ids = data.item_ids;
    part.triples.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = begin; i < begin + count; ++i) {
      part.triples.push_back(data.triples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
    }
    part.finalize();
    return part;
  };

  SplitResult out;
  out.train = make_part(0, part1);
  out.validation = make_part(part1, part2);
  out.test = make_part(part1 + part2, part3);
  return out;
}

namespace {

void write_dataset_header(std::FILE* f, const ObservedDataset& ds) {
  std::fprintf(f, "#convrec-split v1\n");
  std::fprintf(f, "#dims\t%lld\t%lld\n", static_cast<long long>(ds.m),
               static_cast<long long>(ds.n));
  std::fprintf(f, "#scale");
  for (double v : ds.scale.values) std::fprintf(f, "\t%.17g", v);
  std::fprintf(f, "\n");
  for (std::size_t i = 0; i < ds.user_ids.size(); ++i) {
    std::fprintf(f, "#user\t%zu\t%s\n", i + 1, ds.user_ids[i].c_str());
  }
  for (std::size_t i = 0; i < ds.item_ids.size(); ++i) {
    std::fprintf(f, "#item\t%zu\t%s\n", i + 1, ds.item_ids[i].c_str());
  }
}

void write_part_triples(std::FILE* f, const ObservedDataset& ds, const std::string& tag) {
  for (const Triple& t : ds.triples) {
    std::fprintf(f, "%d\t%d\t%d\t%s\n", t.user, t.item, t.rating_index, tag.c_str());
  }
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

void save_split_manifest(const std::string& path, const SplitResult& parts) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw data_error("cannot write manifest: " + path);
  write_dataset_header(f.get(), parts.train);
  write_part_triples(f.get(), parts.train, "train");
  write_part_triples(f.get(), parts.validation, "validation");
  write_part_triples(f.get(), parts.test, "test");
}

void save_dataset_manifest(const std::string& path, const ObservedDataset& data,
                           const std::string& part_tag) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw data_error("cannot write manifest: " + path);
  write_dataset_header(f.get(), data);
  write_part_triples(f.get(), data, part_tag);
}

SplitResult load_split_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open manifest: " + path);

  ObservedDataset base;
  SplitResult out;
  std::string line;
  std::int64_t line_no = 0;
  bool saw_magic = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto fields = split_fields(line, "\t");
      if (line.rfind("#convrec-split", 0) == 0) {
        saw_magic = true;
      } else if (fields[0] == "#dims" && fields.size() == 3) {
        base.m = std::stoll(fields[1]);
        base.n = std::stoll(fields[2]);
      } else if (fields[0] == "#scale") {
        for (std::size_t i = 1; i < fields.size(); ++i) {
          double v;
          if (!parse_double(fields[i], v)) throw data_error("manifest: bad scale value");
          base.scale.values.push_back(v);
        }
      } else if (fields[0] == "#user" && fields.size() == 3) {
        base.user_ids.push_back(fields[2]);
      } else if (fields[0] == "#item" && fields.size() == 3) {
        base.item_ids.push_back(fields[2]);
      }
      continue;
    }
    if (!saw_magic) throw data_error("not a convrec split manifest: " + path);
    auto fields = split_fields(line, "\t");
    if (fields.size() != 4) {
      throw data_error("manifest line " + std::to_string(line_no) + ": expected 4 fields");
    }
    Triple t;
    t.user = static_cast<std::int32_t>(std::stol(fields[0]));
    t.item = static_cast<std::int32_t>(std::stol(fields[1]));
    t.rating_index = static_cast<std::int32_t>(std::stol(fields[2]));
    if (t.user < 1 || t.user > base.m || t.item < 1 || t.item > base.n) {
      throw data_error("manifest line " + std::to_string(line_no) + ": index out of range");
    }
    if (fields[3] == "train") {
      out.train.triples.push_back(t);
    } else if (fields[3] == "validation") {
      out.validation.triples.push_back(t);
    } else if (fields[3] == "test") {
      out.test.triples.push_back(t);
    } else {
      throw data_error("manifest line " + std::to_string(line_no) + ": unknown part tag '" +
                       fields[3] + "'");
    }
  }
  if (!saw_magic) throw data_error("not a convrec split manifest: " + path);

  for (ObservedDataset* part : {&out.train, &out.validation, &out.test}) {
    part->m = base.m;
    part->n = base.n;
    part->scale = base.scale;
    part->user_ids = base.user_ids;
    part->item_ids = base.item_ids;
    part->finalize();
  }
  return out;
}

}  // namespace convrec
