#include "sfe/service.hpp"

#include <openssl/evp.h>

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <random>
#include <regex>

#include "sfe/data.hpp"
#include "sfe/model_io.hpp"
#include "sfe/train.hpp"

namespace sfe::service {

namespace fs = std::filesystem;

namespace {

constexpr int kMaxResolution = 512;

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

HttpError unprocessable(const std::string& message) { return HttpError(422, message); }

const json& require(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw unprocessable(std::string("missing field '") + key + "'");
  return j.at(key);
}

std::string require_id(const json& j, const char* key) {
  const json& v = require(j, key);
  if (!v.is_string() || !valid_id(v.get<std::string>())) {
    throw unprocessable(std::string("field '") + key + "' is not a valid id");
  }
  return v.get<std::string>();
}

template <typename T>
T optional_number(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  if (!j.at(key).is_number()) throw unprocessable(std::string("field '") + key + "' must be a number");
  return j.at(key).get<T>();
}

CameraPose pose_from(const json& request, const CameraPose& fallback = {}) {
  if (!request.contains("pose") || request.at("pose").is_null()) return fallback;
  const json& p = request.at("pose");
  try {
    if (!p.is_object()) throw DomainError("pose must be an object");
    for (const char* key : {"pitch", "yaw", "roll"}) {
      if (p.contains(key) && !p.at(key).is_number()) throw DomainError(std::string("pose.") + key + " must be a number");
    }
    return CameraPose::checked(p.value("pitch", 0.0), p.value("yaw", 0.0), p.value("roll", 0.0));
  } catch (const DomainError& e) {
    throw unprocessable(std::string("malformed pose: ") + e.what());
  }
}

json pose_json(const CameraPose& p) { return {{"pitch", p.pitch}, {"yaw", p.yaw}, {"roll", p.roll}}; }

LatentCode latent_from(const json& v, int dim, const std::string& what) {
  if (!v.is_array() || static_cast<int>(v.size()) != dim) {
    throw unprocessable(what + " must be an array of " + std::to_string(dim) + " numbers");
  }
  Eigen::VectorXd z(dim);
  for (int i = 0; i < dim; ++i) {
    if (!v[static_cast<std::size_t>(i)].is_number()) throw unprocessable(what + " must contain numbers");
    z[i] = v[static_cast<std::size_t>(i)].get<double>();
  }
  try {
    return LatentCode(std::move(z));
  } catch (const Error& e) {
    throw unprocessable(what + ": " + e.what());
  }
}

json latent_json(const LatentCode& z) { return std::vector<double>(z.values().data(), z.values().data() + z.dim()); }

struct LatentChoice {
  LatentCode z;
  std::vector<LatentCode> z_groups;
};

LatentChoice latents_from(const json& request, const render::Generator& gen) {
  const int d = gen.model().latent_dim;
  const int n = gen.model().num_groups;
  LatentChoice c;
  const bool has_z = request.contains("z") && !request.at("z").is_null();
  const bool has_seed = request.contains("seed") && !request.at("seed").is_null();
  if (!has_z && !has_seed) throw unprocessable("either latents (z, z_i) or a seed is required");
  std::vector<LatentCode> sampled;
  if (has_seed) {
    if (!request.at("seed").is_number_unsigned() && !request.at("seed").is_number_integer()) {
      throw unprocessable("seed must be an integer");
    }
    Rng rng(request.at("seed").get<std::uint64_t>());
    auto draw = [&] {
      Eigen::VectorXd v(d);
      for (int i = 0; i < d; ++i) v[i] = rng.normal();
      return LatentCode(std::move(v));
    };
    c.z = draw();
    for (int g = 0; g < n; ++g) c.z_groups.push_back(draw());
  }
  if (has_z) c.z = latent_from(request.at("z"), d, "z");
  if (request.contains("z_i") && !request.at("z_i").is_null()) {
    const json& zi = request.at("z_i");
    if (!zi.is_array() || static_cast<int>(zi.size()) != n) {
      throw unprocessable("z_i must hold " + std::to_string(n) + " latents");
    }
    c.z_groups.clear();
    for (int g = 0; g < n; ++g) c.z_groups.push_back(latent_from(zi[static_cast<std::size_t>(g)], d, "z_i"));
  }
  if (static_cast<int>(c.z_groups.size()) != n) throw unprocessable("z_i is required when no seed is given");
  return c;
}

std::pair<int, int> resolution_from(const json& request, const render::Generator& gen) {
  const int w = optional_number<int>(request, "width", gen.config().render.width);
  const int h = optional_number<int>(request, "height", gen.config().render.height);
  if (w < 1 || h < 1 || w > kMaxResolution || h > kMaxResolution) {
    throw unprocessable("resolution must be within 1.." + std::to_string(kMaxResolution));
  }
  return {w, h};
}

io::LabelImage label_image(const std::vector<int>& labels, int w, int h) {
  io::LabelImage img{w, h, std::vector<std::uint8_t>(labels.size())};
  for (std::size_t i = 0; i < labels.size(); ++i) img.labels[i] = static_cast<std::uint8_t>(labels[i]);
  return img;
}

json sem_meta(const render::Generator& gen, const std::vector<int>& labels) {
  const int n = gen.model().num_groups;
  std::vector<std::int64_t> hist(static_cast<std::size_t>(n), 0);
  for (int l : labels) ++hist[static_cast<std::size_t>(l)];
  json palette = json::array();
  const auto& pal = io::label_palette();
  for (int g = 0; g < n; ++g) {
    palette.push_back({pal[static_cast<std::size_t>(g) * 3], pal[static_cast<std::size_t>(g) * 3 + 1],
                       pal[static_cast<std::size_t>(g) * 3 + 2]});
  }
  return {{"groups", gen.model().group_names}, {"histogram", hist}, {"palette", palette}};
}

std::string b64_png(const io::Bytes& png) { return base64_encode(png); }

io::Bytes decode_b64_field(const json& request, const char* key) {
  const json& v = require(request, key);
  if (!v.is_string()) throw unprocessable(std::string("field '") + key + "' must be a base64 string");
  try {
    return base64_decode(v.get<std::string>());
  } catch (const Error& e) {
    throw unprocessable(std::string("field '") + key + "': " + e.what());
  }
}

std::vector<int> decode_mask(const io::Bytes& png, int n, int w, int h, const std::string& what) {
  io::LabelImage img;
  try {
    img = io::decode_label_png(png);
  } catch (const IoError& e) {
    throw unprocessable(what + ": " + e.what());
  }
  if (img.width != w || img.height != h) {
    throw unprocessable(what + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) + ", expected " +
                        std::to_string(w) + "x" + std::to_string(h));
  }
  std::vector<int> out(img.labels.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = img.labels[i];
    if (out[i] >= n) {
      throw unprocessable(what + " has label " + std::to_string(out[i]) + " at pixel (" + std::to_string(i % w) +
                          ", " + std::to_string(i / w) + ")");
    }
  }
  return out;
}

std::vector<std::uint8_t> decode_region(const io::Bytes& png, int w, int h) {
  const auto labels = decode_mask(png, 256, w, h, "region mask");
  std::vector<std::uint8_t> r(labels.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = labels[i] != 0 ? 1 : 0;
  return r;
}

void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2)); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// Stored next to every inversion: the target (image + group mask) and pose.
void save_target(const fs::path& dir, const invedit::Target& t) {
  io::write_file(dir / "target.png", io::encode_png(io::to_rgb8(t.rgb, t.width, t.height)));
  io::write_file(dir / "mask.png", io::encode_label_png(label_image(t.labels, t.width, t.height)));
  write_json(dir / "target.json", {{"width", t.width}, {"height", t.height}, {"pose", pose_json(t.pose)}});
}

invedit::Target load_target(const fs::path& dir) {
  const json meta = read_json(dir / "target.json");
  invedit::Target t;
  t.width = meta.at("width").get<int>();
  t.height = meta.at("height").get<int>();
  const json& p = meta.at("pose");
  t.pose = CameraPose::checked(p.at("pitch").get<double>(), p.at("yaw").get<double>(), p.at("roll").get<double>());
  t.rgb = io::to_unit(io::decode_png(io::read_file(dir / "target.png")));
  const auto mask = io::decode_label_png(io::read_file(dir / "mask.png"));
  t.labels.assign(mask.labels.begin(), mask.labels.end());
  return t;
}

void save_frame_pngs(const fs::path& dir, const std::string& stem, const render::RenderedFrame& f) {
  io::write_file(dir / (stem + ".png"), io::encode_png(io::to_rgb8(f.rgb, f.width, f.height)));
  io::write_file(dir / (stem + "_labels.png"), io::encode_label_png(label_image(f.labels, f.width, f.height)));
}

json trace_file(const fs::path& path, const std::vector<invedit::TraceEntry>& trace) {
  std::string text;
  for (const auto& e : trace) text += invedit::to_json(e).dump() + "\n";
  io::write_text(path, text);
  return path.string();
}

}  // namespace

// ---- base64 and ids ----------------------------------------------------------

std::string base64_encode(std::span<const std::uint8_t> data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

io::Bytes base64_decode(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  // Accept data URLs and embedded whitespace.
  const auto comma = text.rfind(',');
  const std::string body = text.rfind("data:", 0) == 0 && comma != std::string::npos ? text.substr(comma + 1) : text;
  for (char c : body) {
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  }
  if (clean.size() % 4 != 0) throw DomainError("invalid base64 length");
  io::Bytes out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw DomainError("invalid base64 data");
  std::size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

bool valid_id(const std::string& id) {
  static const std::regex re("[A-Za-z0-9_-][A-Za-z0-9_.-]{0,63}");
  return std::regex_match(id, re);
}

// ---- checkpoint store --------------------------------------------------------------

CheckpointStore::CheckpointStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

std::vector<std::string> CheckpointStore::list() const {
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(root_)) {
    if (e.is_regular_file() && e.path().extension() == ".sfe") ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

bool CheckpointStore::exists(const std::string& id) const { return valid_id(id) && fs::is_regular_file(path(id)); }

fs::path CheckpointStore::path(const std::string& id) const { return root_ / (id + ".sfe"); }

std::shared_ptr<const render::Generator> CheckpointStore::generator(const std::string& id) {
  if (!exists(id)) throw HttpError(404, "unknown checkpoint '" + id + "'");
  const auto stamp = fs::last_write_time(path(id));
  std::lock_guard lock(mutex_);
  auto it = cache_.find(id);
  if (it != cache_.end() && it->second.first == stamp) return it->second.second;
  auto gen = std::make_shared<const render::Generator>(load_generator(path(id)));
  cache_[id] = {stamp, gen};
  return gen;
}

void CheckpointStore::put(const std::string& id, const render::Generator& gen) {
  if (!valid_id(id)) throw unprocessable("invalid checkpoint id '" + id + "'");
  save_generator(gen, path(id));
}

void CheckpointStore::import(const std::string& id, const fs::path& file) {
  if (!valid_id(id)) throw unprocessable("invalid checkpoint id '" + id + "'");
  io::write_file(path(id), io::read_file(file));
}

// ---- jobs --------------------------------------------------------------------------

std::string to_string(JobState s) {
  switch (s) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    case JobState::kFailed: return "failed";
  }
  return "failed";
}

JobState job_state_from(const std::string& s) {
  if (s == "queued") return JobState::kQueued;
  if (s == "running") return JobState::kRunning;
  if (s == "done") return JobState::kDone;
  if (s == "failed") return JobState::kFailed;
  throw IoError("unknown job state '" + s + "'");
}

json to_json(const Job& j) {
  return {{"id", j.id},
          {"kind", j.kind},
          {"checkpoint_id", j.checkpoint_id},
          {"state", to_string(j.state)},
          {"progress", j.progress},
          {"params", j.params},
          {"artifacts", j.artifacts},
          {"result", j.result},
          {"trace_tail", j.trace_tail},
          {"error", j.error},
          {"created_ms", j.created_ms},
          {"updated_ms", j.updated_ms}};
}

Job job_from_json(const json& j) {
  Job job;
  job.id = j.at("id").get<std::string>();
  job.kind = j.at("kind").get<std::string>();
  job.checkpoint_id = j.value("checkpoint_id", std::string());
  job.state = job_state_from(j.at("state").get<std::string>());
  job.progress = j.value("progress", 0.0);
  job.params = j.value("params", json::object());
  job.artifacts = j.value("artifacts", json::object());
  job.result = j.value("result", json::object());
  job.trace_tail = j.value("trace_tail", std::vector<json>{});
  job.error = j.value("error", std::string());
  job.created_ms = j.value("created_ms", std::int64_t{0});
  job.updated_ms = j.value("updated_ms", std::int64_t{0});
  return job;
}

JobLedger::JobLedger(fs::path file) : file_(std::move(file)) {
  if (!fs::exists(file_)) return;
  const json j = read_json(file_);
  try {
    for (const auto& item : j.at("jobs")) {
      Job job = job_from_json(item);
      jobs_[job.id] = std::move(job);
    }
    counter_ = j.value("counter", std::uint64_t{jobs_.size()});
  } catch (const json::exception& e) {
    throw IoError(file_.string() + ": " + e.what());
  }
}

void JobLedger::recover() {
  std::lock_guard lock(mutex_);
  bool changed = false;
  for (auto& [id, job] : jobs_) {
    if (job.state == JobState::kQueued || job.state == JobState::kRunning) {
      job.state = JobState::kFailed;
      job.error = "interrupted by a service restart";
      job.updated_ms = now_ms();
      changed = true;
    }
  }
  if (changed) persist_locked();
}

Job JobLedger::create(const std::string& kind, const std::string& checkpoint_id, const json& params) {
  std::lock_guard lock(mutex_);
  for (const auto& [id, job] : jobs_) {
    if (job.checkpoint_id == checkpoint_id && (job.state == JobState::kQueued || job.state == JobState::kRunning)) {
      throw HttpError(409, "checkpoint '" + checkpoint_id + "' is held by job " + id);
    }
  }
  static thread_local std::mt19937_64 gen{std::random_device{}()};
  char buf[48];
  std::snprintf(buf, sizeof(buf), "job-%06llu-%08llx", static_cast<unsigned long long>(++counter_),
                static_cast<unsigned long long>(gen() & 0xffffffffULL));
  Job job;
  job.id = buf;
  job.kind = kind;
  job.checkpoint_id = checkpoint_id;
  job.params = params;
  job.created_ms = job.updated_ms = now_ms();
  jobs_[job.id] = job;
  persist_locked();
  return job;
}

std::optional<Job> JobLedger::get(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second;
}

std::vector<Job> JobLedger::list() const {
  std::lock_guard lock(mutex_);
  std::vector<Job> out;
  for (const auto& [id, job] : jobs_) out.push_back(job);
  return out;
}

Job& JobLedger::at_locked(const std::string& id) {
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw HttpError(404, "unknown job '" + id + "'");
  return it->second;
}

void JobLedger::start(const std::string& id) {
  std::lock_guard lock(mutex_);
  Job& job = at_locked(id);
  if (job.state != JobState::kQueued) throw std::logic_error("job " + id + " is not queued");
  job.state = JobState::kRunning;
  job.updated_ms = now_ms();
  persist_locked();
}

void JobLedger::progress(const std::string& id, double fraction, const json& trace_entry) {
  std::lock_guard lock(mutex_);
  Job& job = at_locked(id);
  job.progress = std::max(job.progress, std::clamp(fraction, 0.0, 1.0));
  if (!trace_entry.is_null()) {
    job.trace_tail.push_back(trace_entry);
    if (job.trace_tail.size() > kTraceTail) job.trace_tail.erase(job.trace_tail.begin());
  }
  job.updated_ms = now_ms();
  persist_locked();
}

void JobLedger::finish(const std::string& id, const json& result, const json& artifacts) {
  std::lock_guard lock(mutex_);
  Job& job = at_locked(id);
  job.state = JobState::kDone;
  job.progress = 1.0;
  job.result = result;
  job.artifacts = artifacts;
  job.updated_ms = now_ms();
  persist_locked();
}

void JobLedger::fail(const std::string& id, const std::string& error) {
  std::lock_guard lock(mutex_);
  Job& job = at_locked(id);
  job.state = JobState::kFailed;
  job.error = error;
  job.updated_ms = now_ms();
  persist_locked();
}

void JobLedger::persist_locked() const {
  json all = json::array();
  for (const auto& [id, job] : jobs_) all.push_back(to_json(job));
  io::write_text(file_, json{{"counter", counter_}, {"jobs", all}}.dump(1));
}

// ---- service ---------------------------------------------------------------------------

ServiceOptions options_from_env(ServiceOptions defaults, int& port) {
  if (const char* dir = std::getenv("SFE_DATA_DIR"); dir && *dir) defaults.data_dir = dir;
  if (const char* p = std::getenv("SFE_PORT"); p && *p) {
    char* end = nullptr;
    const long v = std::strtol(p, &end, 10);
    if (*end != '\0' || v < 0 || v > 65535) throw ConfigError("SFE_PORT", "not a port number: " + std::string(p));
    port = static_cast<int>(v);
  }
  return defaults;
}

Service::Service(ServiceOptions options)
    : options_(std::move(options)),
      store_(options_.data_dir / "checkpoints"),
      ledger_((fs::create_directories(options_.data_dir), options_.data_dir / "jobs.json")) {
  fs::create_directories(options_.data_dir / "inversions");
  fs::create_directories(options_.data_dir / "pivots");
  fs::create_directories(options_.data_dir / "runs");
  ledger_.recover();
  worker_ = std::thread([this] { worker_loop(); });
}

Service::~Service() {
  {
    std::lock_guard lock(queue_mutex_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

json Service::health() const {
  std::size_t active = 0;
  for (const auto& j : ledger_.list()) active += j.state == JobState::kQueued || j.state == JobState::kRunning;
  return {{"status", "ok"}, {"active_jobs", active}, {"data_dir", options_.data_dir.string()}};
}

json Service::checkpoints() const {
  json out = json::array();
  for (const auto& id : store_.list()) {
    const auto p = store_.path(id);
    out.push_back({{"id", id}, {"bytes", fs::file_size(p)}});
  }
  return {{"checkpoints", out}};
}

json Service::render(const json& request) {
  const auto id = require_id(request, "checkpoint_id");
  const auto gen = store_.generator(id);
  json out = {{"checkpoint_id", id}};
  render::RenderedFrame frame;
  if (request.contains("inversion_id")) {
    const auto inv_id = require_id(request, "inversion_id");
    const auto dir = inversion_dir(inv_id);
    const auto artifact = invedit::load_inversion(dir / "inversion.sfe");
    const auto target = load_target(dir);
    const CameraPose pose = pose_from(request, target.pose);
    const auto [w, h] = resolution_from(request, *gen);
    frame = invedit::render_offset(*gen, artifact.pivot, artifact.offset, pose, w, h);
    out["pose"] = pose_json(pose);
    out["inversion_id"] = inv_id;
  } else {
    const auto lat = latents_from(request, *gen);
    const CameraPose pose = pose_from(request);
    const auto [w, h] = resolution_from(request, *gen);
    frame = render::render_frame(*gen, lat.z, lat.z_groups, pose, w, h);
    out["pose"] = pose_json(pose);
    out["z"] = latent_json(lat.z);
    json zi = json::array();
    for (const auto& z : lat.z_groups) zi.push_back(latent_json(z));
    out["z_i"] = zi;
  }
  out["width"] = frame.width;
  out["height"] = frame.height;
  out["rgb_png"] = b64_png(io::encode_png(io::to_rgb8(frame.rgb, frame.width, frame.height)));
  out["labels_png"] = b64_png(io::encode_label_png(label_image(frame.labels, frame.width, frame.height)));
  out["sem_meta"] = sem_meta(*gen, frame.labels);
  return out;
}

json Service::semantic(const json& request) {
  const auto id = require_id(request, "checkpoint_id");
  const auto gen = store_.generator(id);
  render::RenderedFrame frame;
  if (request.contains("inversion_id")) {
    const auto dir = inversion_dir(require_id(request, "inversion_id"));
    const auto artifact = invedit::load_inversion(dir / "inversion.sfe");
    const auto target = load_target(dir);
    const auto [w, h] = resolution_from(request, *gen);
    frame = invedit::render_offset(*gen, artifact.pivot, artifact.offset, pose_from(request, target.pose), w, h);
  } else {
    const auto lat = latents_from(request, *gen);
    const auto [w, h] = resolution_from(request, *gen);
    frame = render::render_semantic_only(*gen, lat.z, pose_from(request), w, h);
  }
  return {{"checkpoint_id", id},
          {"width", frame.width},
          {"height", frame.height},
          {"labels", frame.labels},
          {"labels_png", b64_png(io::encode_label_png(label_image(frame.labels, frame.width, frame.height)))},
          {"sem_meta", sem_meta(*gen, frame.labels)}};
}

std::shared_ptr<const invedit::PivotLatent> Service::pivot_for(const std::string& checkpoint_id,
                                                               const render::Generator& gen) {
  std::lock_guard lock(pivot_mutex_);
  const auto stamp = fs::last_write_time(store_.path(checkpoint_id));
  const fs::path file = options_.data_dir / "pivots" / (checkpoint_id + ".sfe");
  auto it = pivots_.find(checkpoint_id);
  if (it != pivots_.end() && fs::exists(file) && fs::last_write_time(file) >= stamp) return it->second;
  std::shared_ptr<const invedit::PivotLatent> p;
  if (fs::exists(file) && fs::last_write_time(file) >= stamp) {
    p = std::make_shared<const invedit::PivotLatent>(invedit::load_pivot(file));
  } else {
    p = std::make_shared<const invedit::PivotLatent>(invedit::compute_pivot(gen, options_.pivot_samples, 0));
    invedit::save_pivot(*p, file);
  }
  pivots_[checkpoint_id] = p;
  return p;
}

json Service::pivot(const json& request) {
  const auto id = require_id(request, "checkpoint_id");
  const auto gen = store_.generator(id);
  const int count = optional_number<int>(request, "sample_count", options_.pivot_samples);
  const auto seed = optional_number<std::uint64_t>(request, "seed", 0);
  if (count < 1) throw unprocessable("sample_count must be >= 1");
  std::shared_ptr<const invedit::PivotLatent> p;
  if (count == options_.pivot_samples && seed == 0) {
    p = pivot_for(id, *gen);
  } else {
    p = std::make_shared<const invedit::PivotLatent>(invedit::compute_pivot(*gen, count, seed));
  }
  json dims = json::array();
  for (const auto& a : p->appearance) dims.push_back(a.cols());
  return {{"checkpoint_id", id},
          {"sample_count", count},
          {"seed", seed},
          {"geometry_dim", p->geometry.cols()},
          {"appearance_dims", dims}};
}

fs::path Service::inversion_dir(const std::string& id) const {
  const fs::path dir = options_.data_dir / "inversions" / id;
  if (!valid_id(id) || !fs::exists(dir / "inversion.sfe")) throw HttpError(404, "unknown inversion '" + id + "'");
  return dir;
}

json Service::enqueue(const std::string& kind, const json& params,
                      const std::function<void(const fs::path&)>& prepare) {
  const std::string ckpt = params.at("checkpoint_id").get<std::string>();
  const Job job = ledger_.create(kind, ckpt, params);
  if (prepare) {
    try {
      const fs::path input = options_.data_dir / "inversions" / job.id / "input";
      fs::create_directories(input);
      prepare(input);
    } catch (const std::exception& e) {
      ledger_.fail(job.id, e.what());
      throw;
    }
  }
  {
    std::lock_guard lock(queue_mutex_);
    queue_.push_back(job.id);
  }
  queue_cv_.notify_all();
  return {{"job_id", job.id}};
}

json Service::invert(const json& request) {
  const auto id = require_id(request, "checkpoint_id");
  const auto gen = store_.generator(id);
  const int n = gen->model().num_groups;
  invedit::Target target;
  target.pose = pose_from(request);
  if (request.contains("self_target")) {
    const json& src = request.at("self_target");
    const auto lat = latents_from(src, *gen);
    const auto [w, h] = resolution_from(src, *gen);
    const auto f = render::render_frame(*gen, lat.z, lat.z_groups, target.pose, w, h);
    target.width = w;
    target.height = h;
    target.rgb = f.rgb;
    target.labels = f.labels;
  } else {
    io::RgbImage img;
    try {
      img = io::decode_png(decode_b64_field(request, "target_image"));
    } catch (const IoError& e) {
      throw unprocessable(std::string("target_image: ") + e.what());
    }
    target.width = img.width;
    target.height = img.height;
    target.rgb = io::to_unit(img);
    target.labels = decode_mask(decode_b64_field(request, "target_mask"), n, img.width, img.height, "target_mask");
  }
  json params = {{"checkpoint_id", id},
                 {"steps", optional_number<int>(request, "steps", gen->config().training.inversion.steps)},
                 {"learning_rate",
                  optional_number<double>(request, "learning_rate", gen->config().training.inversion.learning_rate)},
                 {"lambdas", request.value("lambdas", json::object())}};
  if (params["steps"].get<int>() < 0) throw unprocessable("steps must be >= 0");
  return enqueue("invert", params, [&](const fs::path& input) { save_target(input, target); });
}

json Service::edit_preview(const json& request) {
  const auto id = require_id(request, "checkpoint_id");
  const auto gen = store_.generator(id);
  const auto inv_id = require_id(request, "inversion_id");
  const auto dir = inversion_dir(inv_id);
  const auto original = load_target(dir);
  const int n = gen->model().num_groups;
  const auto edited = decode_mask(decode_b64_field(request, "edited_mask_png"), n, original.width, original.height,
                                  "edited mask");
  std::optional<std::vector<std::uint8_t>> region;
  if (request.contains("region_png") && !request.at("region_png").is_null()) {
    region = decode_region(decode_b64_field(request, "region_png"), original.width, original.height);
  }
  json params = {{"checkpoint_id", id},
                 {"inversion_id", inv_id},
                 {"steps", optional_number<int>(request, "steps", gen->config().training.inversion.steps)},
                 {"learning_rate",
                  optional_number<double>(request, "learning_rate", gen->config().training.inversion.learning_rate)}};
  const bool unchanged = edited == original.labels &&
                         (!region || std::all_of(region->begin(), region->end(), [](auto v) { return v == 0; }));
  if (unchanged) {
    // Nothing to optimize: finish right away with an empty diff.
    const Job job = ledger_.create("edit", id, params);
    ledger_.start(job.id);
    ledger_.finish(job.id,
                   {{"inversion_id", inv_id}, {"changed_pixels", 0}, {"region_pixels", 0}, {"unchanged", true}},
                   json::object());
    return {{"job_id", job.id}};
  }
  return enqueue("edit", params, [&](const fs::path& input) {
    io::write_file(input / "edited_mask.png",
                   io::encode_label_png(label_image(edited, original.width, original.height)));
    if (region) {
      std::vector<int> r(region->begin(), region->end());
      io::write_file(input / "region.png", io::encode_label_png(label_image(r, original.width, original.height)));
    }
  });
}

json Service::transfer(const json& request) {
  const auto id = require_id(request, "checkpoint_id");
  const auto gen = store_.generator(id);
  const auto src = require_id(request, "source_inversion_id");
  const auto tgt = require_id(request, "target_inversion_id");
  inversion_dir(src);
  inversion_dir(tgt);
  const json& g = require(request, "group");
  if (!g.is_number_integer() || g.get<int>() < 0 || g.get<int>() >= gen->model().num_groups) {
    throw unprocessable("group must be an integer in [0, " + std::to_string(gen->model().num_groups) + ")");
  }
  const std::string mode = request.value("mode", std::string("appearance"));
  if (mode != "appearance" && mode != "geometry") throw unprocessable("mode must be 'appearance' or 'geometry'");
  json params = {{"checkpoint_id", id},
                 {"source_inversion_id", src},
                 {"target_inversion_id", tgt},
                 {"group", g.get<int>()},
                 {"mode", mode},
                 {"steps", optional_number<int>(request, "steps", gen->config().training.inversion.steps)},
                 {"learning_rate",
                  optional_number<double>(request, "learning_rate", gen->config().training.inversion.learning_rate)}};
  return enqueue("transfer", params);
}

json Service::submit(const json& request) {
  const json& kind = require(request, "kind");
  if (!kind.is_string()) throw unprocessable("kind must be a string");
  const json params = request.value("params", json::object());
  const auto k = kind.get<std::string>();
  if (k == "invert") return invert(params);
  if (k == "edit") return edit_preview(params);
  if (k == "transfer") return transfer(params);
  if (k == "train") {
    const auto id = require_id(params, "checkpoint_id");
    TrainConfig config;
    try {
      config = config_from_json(params.value("config", json::object()));
    } catch (const ConfigError& e) {
      throw unprocessable(std::string("config: ") + e.what());
    }
    json p = params;
    p["config"] = sfe::to_json(config);
    return enqueue("train", p);
  }
  throw unprocessable("unknown job kind '" + k + "'");
}

json Service::job(const std::string& id) const {
  const auto j = ledger_.get(id);
  if (!j) throw HttpError(404, "unknown job '" + id + "'");
  return to_json(*j);
}

json Service::jobs() const {
  json out = json::array();
  for (const auto& j : ledger_.list()) out.push_back(to_json(j));
  return {{"jobs", out}};
}

void Service::wait_idle() {
  std::unique_lock lock(queue_mutex_);
  idle_cv_.wait(lock, [this] { return queue_.empty() && !busy_; });
}

void Service::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(queue_mutex_);
      queue_cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      busy_ = true;
    }
    if (const auto job = ledger_.get(id)) {
      try {
        ledger_.start(id);
        run_job(*job);
      } catch (const std::exception& e) {
        ledger_.fail(id, e.what());
      }
    }
    {
      std::lock_guard lock(queue_mutex_);
      busy_ = false;
    }
    idle_cv_.notify_all();
  }
}

void Service::run_job(const Job& job) {
  if (job.kind == "train") return run_train(job);
  if (job.kind == "invert") return run_invert(job);
  if (job.kind == "edit") return run_edit(job);
  if (job.kind == "transfer") return run_transfer(job);
  throw std::logic_error("unknown job kind " + job.kind);
}

namespace {

invedit::OptimizeOptions optimize_options(const render::Generator& gen, const json& params) {
  auto o = invedit::options_from(gen.config().training.inversion);
  o.steps = params.value("steps", o.steps);
  o.learning_rate = params.value("learning_rate", o.learning_rate);
  const json l = params.value("lambdas", json::object());
  o.weights.lambda_s = l.value("lambda_s", o.weights.lambda_s);
  o.weights.lambda_im = l.value("lambda_im", o.weights.lambda_im);
  o.weights.lambda_vgg = l.value("lambda_vgg", o.weights.lambda_vgg);
  return o;
}

}  // namespace

void Service::run_train(const Job& job) {
  const auto config = config_from_json(job.params.at("config"));
  data::Dataset dataset;
  if (job.params.contains("dataset_root")) {
    dataset = data::load_dataset(job.params.at("dataset_root").get<std::string>());
  } else if (!config.data.root.empty()) {
    dataset = data::load_dataset(config.data.root);
  } else {
    dataset = data::synth_generate(config, job.params.value("synthetic_seed", config.training.seed));
  }
  train::RunOptions opts;
  opts.out_dir = options_.data_dir / "runs" / job.id;
  opts.max_steps = job.params.value("max_steps", -1);
  const double total = static_cast<double>(config.training.stage1_iterations + config.training.stage2_iterations);
  opts.on_step = [&](const train::StepMetrics& m) {
    ledger_.progress(job.id, static_cast<double>(m.iter) / total, train::to_json(m));
  };
  const auto summary = train::run_training(config, dataset, opts);
  json artifacts = {{"run_dir", opts.out_dir.string()}};
  if (!summary.last_checkpoint.empty()) {
    store_.import(job.checkpoint_id, summary.last_checkpoint);
    artifacts["checkpoint"] = store_.path(job.checkpoint_id).string();
  }
  ledger_.finish(job.id, {{"steps_run", summary.steps_run}, {"final_iteration", summary.final_iteration}},
                 artifacts);
}

void Service::run_invert(const Job& job) {
  const auto gen = store_.generator(job.checkpoint_id);
  const auto pivot = pivot_for(job.checkpoint_id, *gen);
  const fs::path dir = options_.data_dir / "inversions" / job.id;
  const auto target = load_target(dir / "input");
  auto opts = optimize_options(*gen, job.params);
  opts.on_step = [&](const invedit::TraceEntry& e) {
    ledger_.progress(job.id, opts.steps ? static_cast<double>(e.iter) / opts.steps : 1.0, invedit::to_json(e));
  };
  const auto result = invedit::invert(*gen, *pivot, target, opts);
  save_target(dir, target);
  invedit::save_inversion({*pivot, result.offset, {{"checkpoint_id", job.checkpoint_id}}}, dir / "inversion.sfe");
  const auto frame = invedit::render_offset(*gen, *pivot, result.offset, target.pose, target.width, target.height);
  save_frame_pngs(dir, "render", frame);
  json artifacts = {{"offset_file", (dir / "inversion.sfe").string()},
                    {"trace_file", trace_file(dir / "trace.jsonl", result.trace)},
                    {"render_png", (dir / "render.png").string()},
                    {"labels_png", (dir / "render_labels.png").string()}};
  ledger_.finish(job.id,
                 {{"inversion_id", job.id},
                  {"final_miou", result.final_miou},
                  {"steps_run", result.trace.empty() ? 0 : result.trace.back().iter},
                  {"warnings", result.warnings}},
                 artifacts);
}

void Service::run_edit(const Job& job) {
  const auto gen = store_.generator(job.checkpoint_id);
  const auto src_dir = inversion_dir(job.params.at("inversion_id").get<std::string>());
  const auto artifact = invedit::load_inversion(src_dir / "inversion.sfe");
  const fs::path dir = options_.data_dir / "inversions" / job.id;
  invedit::EditRequest req;
  req.original = load_target(src_dir);
  const auto edited = io::decode_label_png(io::read_file(dir / "input" / "edited_mask.png"));
  req.edited_labels.assign(edited.labels.begin(), edited.labels.end());
  if (fs::exists(dir / "input" / "region.png")) {
    const auto r = io::decode_label_png(io::read_file(dir / "input" / "region.png"));
    req.region = r.labels;
  }
  const auto region = req.region ? *req.region : invedit::label_diff(req.original.labels, req.edited_labels);
  auto opts = optimize_options(*gen, job.params);
  opts.on_step = [&](const invedit::TraceEntry& e) {
    ledger_.progress(job.id, opts.steps ? static_cast<double>(e.iter) / opts.steps : 1.0, invedit::to_json(e));
  };
  const auto result = invedit::edit(*gen, artifact.pivot, artifact.offset, req, opts);

  const auto& t = req.original;
  const auto before = invedit::render_offset(*gen, artifact.pivot, artifact.offset, t.pose, t.width, t.height);
  const auto after = invedit::render_offset(*gen, artifact.pivot, result.offset, t.pose, t.width, t.height);
  const auto diff = invedit::label_diff(before.labels, after.labels);
  std::int64_t changed = 0, in_region = 0, outside = 0, region_pixels = 0;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    changed += diff[i];
    region_pixels += region[i] != 0;
    if (region[i]) {
      in_region += diff[i];
    } else {
      outside += diff[i];
    }
  }
  invedit::Target edited_target = t;
  edited_target.labels = req.edited_labels;
  save_target(dir, edited_target);
  invedit::save_inversion({artifact.pivot, result.offset, {{"checkpoint_id", job.checkpoint_id}}},
                          dir / "inversion.sfe");
  save_frame_pngs(dir, "before", before);
  save_frame_pngs(dir, "after", after);
  std::vector<int> diff_labels(diff.begin(), diff.end());
  io::write_file(dir / "diff.png", io::encode_label_png(label_image(diff_labels, t.width, t.height)));
  json artifacts = {{"offset_file", (dir / "inversion.sfe").string()},
                    {"trace_file", trace_file(dir / "trace.jsonl", result.trace)},
                    {"before_png", (dir / "before.png").string()},
                    {"after_png", (dir / "after.png").string()},
                    {"diff_png", (dir / "diff.png").string()}};
  ledger_.finish(job.id,
                 {{"inversion_id", job.id},
                  {"final_miou", result.final_miou},
                  {"changed_pixels", changed},
                  {"changed_in_region", in_region},
                  {"changed_outside_region", outside},
                  {"region_pixels", region_pixels},
                  {"warnings", result.warnings}},
                 artifacts);
}

void Service::run_transfer(const Job& job) {
  const auto gen = store_.generator(job.checkpoint_id);
  const auto src_dir = inversion_dir(job.params.at("source_inversion_id").get<std::string>());
  const auto tgt_dir = inversion_dir(job.params.at("target_inversion_id").get<std::string>());
  const auto src = invedit::load_inversion(src_dir / "inversion.sfe");
  const auto tgt = invedit::load_inversion(tgt_dir / "inversion.sfe");
  if (!(src.pivot.geometry == tgt.pivot.geometry)) throw DomainError("inversions were made against different pivots");
  const int group = job.params.at("group").get<int>();
  const auto src_target = load_target(src_dir);
  const auto tgt_target = load_target(tgt_dir);
  invedit::OptimizeResult result;
  if (job.params.at("mode").get<std::string>() == "appearance") {
    result.offset = invedit::transfer_appearance(src.offset, tgt.offset, group);
  } else {
    auto opts = optimize_options(*gen, job.params);
    opts.on_step = [&](const invedit::TraceEntry& e) {
      ledger_.progress(job.id, opts.steps ? static_cast<double>(e.iter) / opts.steps : 1.0, invedit::to_json(e));
    };
    result = invedit::transfer_geometry(*gen, src.pivot, src.offset, src_target, tgt_target, group, opts);
  }
  const fs::path dir = options_.data_dir / "inversions" / job.id;
  save_target(dir, src_target);
  invedit::save_inversion({src.pivot, result.offset, {{"checkpoint_id", job.checkpoint_id}}}, dir / "inversion.sfe");
  const auto frame =
      invedit::render_offset(*gen, src.pivot, result.offset, src_target.pose, src_target.width, src_target.height);
  save_frame_pngs(dir, "render", frame);
  ledger_.finish(job.id, {{"inversion_id", job.id}, {"warnings", result.warnings}},
                 {{"offset_file", (dir / "inversion.sfe").string()},
                  {"render_png", (dir / "render.png").string()},
                  {"labels_png", (dir / "render_labels.png").string()}});
}

// ---- HTTP ---------------------------------------------------------------------------

namespace {

constexpr const char* kPlaceholderPage =
    "<!doctype html><html><head><meta charset=\"utf-8\"><title>sfe</title></head>"
    "<body><h1>sfe service</h1><p>No UI assets are installed. The JSON API is available under "
    "/health, /checkpoints, /render, /semantic, /pivot, /invert, /edit/preview, /transfer and /jobs.</p>"
    "</body></html>";

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Fn>
void handle(httplib::Response& res, Fn&& fn) {
  try {
    reply(res, 200, fn());
  } catch (const HttpError& e) {
    reply(res, e.status(), {{"error", e.what()}, {"status", e.status()}});
  } catch (const ConfigError& e) {
    reply(res, 422, {{"error", e.what()}, {"key", e.key()}, {"status", 422}});
  } catch (const DomainError& e) {
    reply(res, 422, {{"error", e.what()}, {"status", 422}});
  } catch (const ShapeError& e) {
    reply(res, 422, {{"error", e.what()}, {"status", 422}});
  } catch (const IndexError& e) {
    reply(res, 422, {{"error", e.what()}, {"status", 422}});
  } catch (const std::exception& e) {
    reply(res, 500, {{"error", e.what()}, {"status", 500}});
  }
}

json body_of(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw HttpError(400, std::string("request body is not JSON: ") + e.what());
  }
}

}  // namespace

void Service::mount(httplib::Server& server) {
  server.Get("/health", [this](const httplib::Request&, httplib::Response& res) { handle(res, [&] { return health(); }); });
  server.Get("/checkpoints",
             [this](const httplib::Request&, httplib::Response& res) { handle(res, [&] { return checkpoints(); }); });
  auto post = [&](const char* path, json (Service::*fn)(const json&)) {
    server.Post(path, [this, fn](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return (this->*fn)(body_of(req)); });
    });
  };
  post("/render", &Service::render);
  post("/semantic", &Service::semantic);
  post("/pivot", &Service::pivot);
  post("/invert", &Service::invert);
  post("/edit/preview", &Service::edit_preview);
  post("/transfer", &Service::transfer);
  post("/jobs", &Service::submit);
  server.Get("/jobs", [this](const httplib::Request&, httplib::Response& res) { handle(res, [&] { return jobs(); }); });
  server.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] { return job(req.matches[1]); });
  });
  server.Get(R"(/artifacts/([^/]+)/([A-Za-z0-9_]+\.(png|jsonl)))",
             [this](const httplib::Request& req, httplib::Response& res) {
               const std::string id = req.matches[1];
               const fs::path file = options_.data_dir / "inversions" / id / std::string(req.matches[2]);
               if (!valid_id(id) || !fs::is_regular_file(file)) {
                 reply(res, 404, {{"error", "no such artifact"}, {"status", 404}});
                 return;
               }
               const auto bytes = io::read_file(file);
               res.set_content(std::string(bytes.begin(), bytes.end()),
                               req.matches[3] == "png" ? "image/png" : "application/x-ndjson");
             });
  if (!options_.static_dir.empty() && fs::is_directory(options_.static_dir)) {
    server.set_mount_point("/", options_.static_dir.string());
  } else {
    server.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kPlaceholderPage, "text/html"); });
  }
}

void serve(const ServiceOptions& options, int port, const std::string& host) {
  Service service(options);
  httplib::Server server;
  service.mount(server);
  if (!server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace sfe::service
