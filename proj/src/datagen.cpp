#include "disdyn/datagen.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <thread>

#include "disdyn/errors.hpp"
#include "json.hpp"

namespace disdyn::datagen {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::OodEasy: return "ood_easy";
    case Split::OodHard: return "ood_hard";
  }
  return "unknown";
}

Split parse_split(std::string_view name) {
  for (Split s : kAllSplits) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

void SplitSpec::validate() const {
  for (const auto& r : factor_ranges) {
    if (!(r.min < r.max)) {
      throw ConfigError("factor range [" + std::to_string(r.min) + ", " + std::to_string(r.max) +
                        "] must satisfy min < max");
    }
  }
  if (n_sequences == 0) throw ConfigError("split needs at least one sequence");
  if (!(noise_var >= 0.0)) throw ConfigError("noise variance must be non-negative");
  if (seq_len == 0) throw ConfigError("sequence length must be positive");
}

namespace {

std::vector<Range> widen(const std::vector<Range>& base, double by) {
  std::vector<Range> out;
  for (const auto& r : base) out.push_back({r.min - by, r.max + by});
  return out;
}

}  // namespace

std::vector<Range> training_ranges(SystemKind kind) {
  switch (kind) {
    case SystemKind::Pendulum: return {{1.0, 1.5}};
    case SystemKind::LotkaVolterra: return {{1.95, 2.05}, {0.95, 1.05}, {3.95, 4.05}, {1.95, 2.05}};
    case SystemKind::ThreeBody: return {{1.95, 2.05}, {1.95, 2.05}, {1.95, 2.05}, {1.95, 2.05}};
  }
  return {};
}

double default_noise_var(SystemKind kind) { return kind == SystemKind::ThreeBody ? 0.01 : 0.05; }

SplitSpec default_split(SystemKind kind, Split split) {
  SplitSpec spec;
  spec.split = split;
  spec.noise_var = default_noise_var(kind);
  spec.seq_len = dynsys::sequence_length(kind);
  spec.n_sequences = split == Split::Train ? 8000 : 1000;
  const auto train = training_ranges(kind);
  switch (split) {
    case Split::Train:
    case Split::Val:
    case Split::Test: spec.factor_ranges = train; break;
    case Split::OodEasy:
      spec.factor_ranges = kind == SystemKind::Pendulum ? std::vector<Range>{{1.5, 1.6}} : widen(train, 0.01);
      break;
    case Split::OodHard:
      spec.factor_ranges = kind == SystemKind::Pendulum ? std::vector<Range>{{0.9, 1.0}} : widen(train, 0.02);
      break;
  }
  return spec;
}

FactorVector sample_factors(SystemKind kind, const SplitSpec& spec,
                            std::span<const Range> train_ranges, Rng& rng) {
  const std::size_t k = dynsys::factor_count(kind);
  if (spec.factor_ranges.size() != k) throw ShapeError("split has wrong number of factor ranges");
  std::vector<double> values(k);
  const bool need_outside = is_ood(spec.split);
  if (need_outside && train_ranges.size() != k) throw ShapeError("training ranges have wrong length");

  for (std::size_t attempt = 0; attempt < kMaxRejections; ++attempt) {
    for (std::size_t i = 0; i < k; ++i) {
      values[i] = rng.uniform(spec.factor_ranges[i].min, spec.factor_ranges[i].max);
    }
    if (!need_outside) return dynsys::make_factors(kind, values);
    for (std::size_t i = 0; i < k; ++i) {
      if (!train_ranges[i].contains(values[i])) return dynsys::make_factors(kind, values);
    }
  }
  throw ConfigError("OOD split " + std::string(to_string(spec.split)) +
                    ": no factor draw outside the training ranges after " +
                    std::to_string(kMaxRejections) + " attempts");
}

double pendulum_initial_angle(double u) {
  constexpr double deg = std::numbers::pi / 180.0;
  return (10.0 + 160.0 * u) * deg;
}

std::vector<double> initial_state(SystemKind kind, Rng& rng) {
  switch (kind) {
    case SystemKind::Pendulum: return {pendulum_initial_angle(rng.uniform()), 0.0};
    case SystemKind::LotkaVolterra: return {5.0, 3.0};
    case SystemKind::ThreeBody:
      return {-1.0, -1.0, 1.0, -1.0, 0.0, 1.0,   // positions
              0.0, 0.5, 0.5, -0.5, -0.5, 0.0};  // velocities
  }
  return {};
}

std::vector<double> add_noise(const Trajectory& traj, double noise_var, Rng& rng) {
  if (!(noise_var >= 0.0)) throw DomainError("noise variance must be non-negative");
  std::vector<double> noisy = traj.states;
  if (noise_var == 0.0) return noisy;
  const double sigma = std::sqrt(noise_var);
  for (double& v : noisy) v += sigma * rng.normal();
  return noisy;
}

Dataset build_dataset(SystemKind kind, const SplitSpec& spec, std::uint64_t seed,
                      const BuildOptions& options) {
  spec.validate();
  if (spec.factor_ranges.size() != dynsys::factor_count(kind)) {
    throw ConfigError("split declares " + std::to_string(spec.factor_ranges.size()) +
                      " factor ranges, system has " + std::to_string(dynsys::factor_count(kind)));
  }
  Dataset ds;
  ds.system = kind;
  ds.spec = spec;
  ds.seed = seed;
  ds.coupling = options.coupling;
  ds.trajectories.resize(spec.n_sequences);
  ds.noisy_states.resize(spec.n_sequences);

  const auto train = training_ranges(kind);
  dynsys::IntegratorOptions iopt;
  iopt.tolerance = options.tolerance;
  iopt.coupling = options.coupling;

  auto generate_one = [&](std::size_t i) {
    Rng rng(derive_seed(seed, i));
    auto factors = sample_factors(kind, spec, train, rng);
    const auto init = initial_state(kind, rng);
    try {
      ds.trajectories[i] = dynsys::integrate(kind, factors, init, spec.seq_len, dynsys::kOutputStep, iopt);
    } catch (const IntegrationError& e) {
      throw IntegrationError("sequence " + std::to_string(i) + ": " + e.what(), e.time());
    }
    ds.noisy_states[i] = add_noise(ds.trajectories[i], spec.noise_var, rng);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, spec.n_sequences));
  if (workers == 1) {
    for (std::size_t i = 0; i < spec.n_sequences; ++i) generate_one(i);
    return ds;
  }

  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < spec.n_sequences; i += workers) {
        try {
          generate_one(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return ds;
}

std::vector<Range> empirical_ranges(const Dataset& ds) {
  const std::size_t k = ds.factor_count();
  std::vector<Range> out(k, Range{std::numeric_limits<double>::infinity(),
                                  -std::numeric_limits<double>::infinity()});
  for (const auto& t : ds.trajectories) {
    for (std::size_t i = 0; i < k; ++i) {
      out[i].min = std::min(out[i].min, t.factors.values[i]);
      out[i].max = std::max(out[i].max, t.factors.values[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// binary helpers

namespace {

std::uint64_t to_le(std::uint64_t bits) {
  if constexpr (std::endian::native == std::endian::little) {
    return bits;
  } else {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((bits >> (8 * i)) & 0xffULL) << (8 * (7 - i));
    return out;
  }
}

std::vector<unsigned char> encode_f64(std::span<const double> values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint64_t le = to_le(std::bit_cast<std::uint64_t>(values[i]));
    std::memcpy(bytes.data() + 8 * i, &le, 8);
  }
  return bytes;
}

std::uint32_t crc32_bytes(std::span<const unsigned char> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

void write_f64_file(const fs::path& path, std::span<const double> values) {
  const auto bytes = encode_f64(values);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<double> read_f64_file(const fs::path& path, std::size_t expected_count) {
  const auto bytes = slurp(path);
  const std::size_t expected = expected_count * 8;
  if (bytes.size() != expected) {
    throw IoError(path.filename().string() + ": expected " + std::to_string(expected) +
                  " bytes, found " + std::to_string(bytes.size()));
  }
  std::vector<double> values(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) {
    std::uint64_t le = 0;
    std::memcpy(&le, bytes.data() + 8 * i, 8);
    values[i] = std::bit_cast<double>(to_le(le));
  }
  return values;
}

std::uint32_t crc32_of_file(const fs::path& path) { return crc32_bytes(slurp(path)); }

std::uint32_t crc32_of(std::span<const double> values) { return crc32_bytes(encode_f64(values)); }

void write_dataset(const Dataset& ds, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  const std::size_t n = ds.size();
  const std::size_t T = ds.seq_len();
  const std::size_t d = ds.state_dim();
  const std::size_t k = ds.factor_count();
  if (ds.noisy_states.size() != n) throw ShapeError("dataset clean/noisy lists differ in length");

  std::vector<double> states, noisy, factors;
  states.reserve(n * T * d);
  noisy.reserve(n * T * d);
  factors.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tr = ds.trajectories[i];
    if (tr.steps != T || tr.dim != d || tr.states.size() != T * d || ds.noisy_states[i].size() != T * d) {
      throw ShapeError("trajectory " + std::to_string(i) + " does not match the dataset shape");
    }
    states.insert(states.end(), tr.states.begin(), tr.states.end());
    noisy.insert(noisy.end(), ds.noisy_states[i].begin(), ds.noisy_states[i].end());
    factors.insert(factors.end(), tr.factors.values.begin(), tr.factors.values.end());
  }

  json files = json::object();
  for (const auto& [name, values] : {std::pair<std::string, const std::vector<double>*>{"states.bin", &states},
                                     {"noisy.bin", &noisy},
                                     {"factors.bin", &factors}}) {
    write_f64_file(dir / name, *values);
    files[name] = {{"bytes", values->size() * 8}, {"crc32", crc32_of(*values)}};
  }

  json ranges = json::array();
  for (const auto& r : ds.spec.factor_ranges) ranges.push_back({r.min, r.max});

  json meta = {
      {"format", "DYNSET"},
      {"format_version", kDynsetVersion},
      {"system", std::string(dynsys::to_string(ds.system))},
      {"split", std::string(to_string(ds.spec.split))},
      {"factor_names", dynsys::factor_names(ds.system)},
      {"ranges", ranges},
      {"k", k},
      {"T", T},
      {"state_dim", d},
      {"n", n},
      {"seed", ds.seed},
      {"noise_var", ds.spec.noise_var},
      {"dt", dynsys::kOutputStep},
      {"files", files},
  };
  if (ds.system == SystemKind::ThreeBody) meta["three_body_coupling"] = std::string(dynsys::to_string(ds.coupling));
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

Dataset read_dataset(const fs::path& dir) {
  json meta;
  try {
    std::ifstream in(dir / "meta.json");
    if (!in) throw IoError("missing meta.json in " + dir.string());
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("meta.json in " + dir.string() + " is not valid JSON: " + e.what());
  }

  try {
    if (meta.at("format").get<std::string>() != "DYNSET") throw IoError("not a DYNSET directory");
    const int version = meta.at("format_version").get<int>();
    if (version != kDynsetVersion) {
      throw IoError("DYNSET version mismatch: file has " + std::to_string(version) + ", reader supports " +
                    std::to_string(kDynsetVersion));
    }

    Dataset ds;
    ds.system = dynsys::parse_system(meta.at("system").get<std::string>());
    ds.spec.split = parse_split(meta.at("split").get<std::string>());
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.spec.noise_var = meta.at("noise_var").get<double>();
    if (meta.contains("three_body_coupling")) {
      ds.coupling = dynsys::parse_coupling(meta.at("three_body_coupling").get<std::string>());
    }
    const auto n = meta.at("n").get<std::size_t>();
    const auto T = meta.at("T").get<std::size_t>();
    const auto d = meta.at("state_dim").get<std::size_t>();
    const auto k = meta.at("k").get<std::size_t>();
    if (d != dynsys::state_dim(ds.system) || k != dynsys::factor_count(ds.system)) {
      throw IoError("meta.json: state_dim/k inconsistent with system " + std::string(dynsys::to_string(ds.system)));
    }
    for (const auto& r : meta.at("ranges")) ds.spec.factor_ranges.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
    if (ds.spec.factor_ranges.size() != k) throw IoError("meta.json: ranges length differs from k");
    ds.spec.n_sequences = n;
    ds.spec.seq_len = T;

    const auto& files = meta.at("files");
    auto load = [&](const std::string& name, std::size_t count) {
      const auto declared = files.at(name).at("bytes").get<std::size_t>();
      if (declared != count * 8) {
        throw IoError(name + ": meta declares " + std::to_string(declared) + " bytes but shape implies " +
                      std::to_string(count * 8));
      }
      auto values = read_f64_file(dir / name, count);
      const auto crc = files.at(name).at("crc32").get<std::uint32_t>();
      if (crc32_of(values) != crc) throw IoError(name + ": checksum mismatch");
      return values;
    };
    const auto states = load("states.bin", n * T * d);
    const auto noisy = load("noisy.bin", n * T * d);
    const auto factors = load("factors.bin", n * k);

    ds.trajectories.resize(n);
    ds.noisy_states.resize(n);
    const auto dt = meta.value("dt", dynsys::kOutputStep);
    for (std::size_t i = 0; i < n; ++i) {
      auto& tr = ds.trajectories[i];
      tr.steps = T;
      tr.dim = d;
      tr.dt = dt;
      tr.states.assign(states.begin() + static_cast<std::ptrdiff_t>(i * T * d),
                       states.begin() + static_cast<std::ptrdiff_t>((i + 1) * T * d));
      tr.initial_state.assign(tr.states.begin(), tr.states.begin() + static_cast<std::ptrdiff_t>(d));
      tr.factors = dynsys::FactorVector{
          std::vector<double>(factors.begin() + static_cast<std::ptrdiff_t>(i * k),
                              factors.begin() + static_cast<std::ptrdiff_t>((i + 1) * k)),
          dynsys::factor_names(ds.system)};
      ds.noisy_states[i].assign(noisy.begin() + static_cast<std::ptrdiff_t>(i * T * d),
                                noisy.begin() + static_cast<std::ptrdiff_t>((i + 1) * T * d));
    }
    return ds;
  } catch (const json::exception& e) {
    throw IoError("meta.json in " + dir.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("meta.json in " + dir.string() + ": " + e.what());
  }
}

}  // namespace disdyn::datagen
