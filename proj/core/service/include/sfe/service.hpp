#pragma once

// HTTP facade: file-backed checkpoint store, JSON job ledger with a single
// FIFO worker, and the render / semantic / inversion / editing endpoints.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfe/errors.hpp"
#include "sfe/image_io.hpp"
#include "sfe/invedit.hpp"
#include "sfe/render.hpp"

namespace httplib {
class Server;
}

namespace sfe::service {

using nlohmann::json;

/// Maps onto an HTTP status code.
class HttpError : public Error {
 public:
  HttpError(int status, const std::string& message) : Error(message), status_(status) {}
  [[nodiscard]] int status() const { return status_; }

 private:
  int status_;
};

std::string base64_encode(std::span<const std::uint8_t> data);
io::Bytes base64_decode(const std::string& text);

/// Ids are 1-64 characters from [A-Za-z0-9_.-] and may not start with a dot.
bool valid_id(const std::string& id);

class CheckpointStore {
 public:
  explicit CheckpointStore(std::filesystem::path root);

  [[nodiscard]] std::vector<std::string> list() const;
  [[nodiscard]] bool exists(const std::string& id) const;
  [[nodiscard]] std::filesystem::path path(const std::string& id) const;
  /// Cached; throws HttpError 404 for unknown ids.
  std::shared_ptr<const render::Generator> generator(const std::string& id);
  void put(const std::string& id, const render::Generator& gen);
  void import(const std::string& id, const std::filesystem::path& file);
  [[nodiscard]] const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
  mutable std::mutex mutex_;
  std::map<std::string, std::pair<std::filesystem::file_time_type, std::shared_ptr<const render::Generator>>> cache_;
};

enum class JobState { kQueued, kRunning, kDone, kFailed };
std::string to_string(JobState s);
JobState job_state_from(const std::string& s);

struct Job {
  std::string id;
  std::string kind;  // train | invert | edit | transfer
  std::string checkpoint_id;
  JobState state = JobState::kQueued;
  double progress = 0.0;
  json params = json::object();
  json artifacts = json::object();
  json result = json::object();
  std::vector<json> trace_tail;
  std::string error;
  std::int64_t created_ms = 0;
  std::int64_t updated_ms = 0;
};

json to_json(const Job& job);
Job job_from_json(const json& j);

/// All jobs in one JSON file, rewritten atomically after every change.
class JobLedger {
 public:
  static constexpr std::size_t kTraceTail = 20;

  explicit JobLedger(std::filesystem::path file);

  /// Jobs left queued or running by a previous process are marked failed.
  void recover();
  /// Throws HttpError 409 while another queued or running job holds the checkpoint.
  Job create(const std::string& kind, const std::string& checkpoint_id, const json& params);
  [[nodiscard]] std::optional<Job> get(const std::string& id) const;
  [[nodiscard]] std::vector<Job> list() const;

  void start(const std::string& id);
  /// Progress is clamped to [0, 1] and never decreases.
  void progress(const std::string& id, double fraction, const json& trace_entry = nullptr);
  void finish(const std::string& id, const json& result, const json& artifacts);
  void fail(const std::string& id, const std::string& error);

 private:
  void persist_locked() const;
  Job& at_locked(const std::string& id);

  std::filesystem::path file_;
  mutable std::mutex mutex_;
  std::map<std::string, Job> jobs_;
  std::uint64_t counter_ = 0;
};

struct ServiceOptions {
  std::filesystem::path data_dir = "sfe_data";
  std::filesystem::path static_dir;  // empty: built-in placeholder page
  int pivot_samples = 10000;
};

/// Reads SFE_DATA_DIR and SFE_PORT over the given defaults.
ServiceOptions options_from_env(ServiceOptions defaults, int& port);

class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  json health() const;
  json checkpoints() const;
  json render(const json& request);
  json semantic(const json& request);
  json pivot(const json& request);
  json invert(const json& request);
  json edit_preview(const json& request);
  json transfer(const json& request);
  json submit(const json& request);  // POST /jobs {kind, params}
  json job(const std::string& id) const;
  json jobs() const;

  /// Blocks until the queue is empty and no job is running.
  void wait_idle();

  void mount(httplib::Server& server);
  [[nodiscard]] CheckpointStore& store() { return store_; }
  [[nodiscard]] const ServiceOptions& options() const { return options_; }

 private:
  /// Creates the job, lets `prepare` write its inputs, then queues it.
  json enqueue(const std::string& kind, const json& params,
               const std::function<void(const std::filesystem::path&)>& prepare = {});
  void worker_loop();
  void run_job(const Job& job);
  void run_train(const Job& job);
  void run_invert(const Job& job);
  void run_edit(const Job& job);
  void run_transfer(const Job& job);
  std::shared_ptr<const invedit::PivotLatent> pivot_for(const std::string& checkpoint_id,
                                                        const render::Generator& gen);
  std::filesystem::path inversion_dir(const std::string& id) const;

  ServiceOptions options_;
  CheckpointStore store_;
  JobLedger ledger_;

  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::condition_variable idle_cv_;
  std::deque<std::string> queue_;
  bool busy_ = false;
  bool stopping_ = false;
  std::thread worker_;

  std::mutex pivot_mutex_;
  std::map<std::string, std::shared_ptr<const invedit::PivotLatent>> pivots_;
};

/// Serves until the process is terminated.
void serve(const ServiceOptions& options, int port, const std::string& host = "0.0.0.0");

}  // namespace sfe::service
