#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "bld/pipeline.hpp"

namespace httplib {
class Server;
}

namespace bld {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path model_dir = "models";
  std::filesystem::path data_dir = "bld-data";
  int job_cap = 1;  // concurrent edit jobs
  int image_size = 64;
  int max_batch = 24;
  EditConfig defaults;

  static ServiceConfig from_json(const nlohmann::json& j);
  static ServiceConfig from_file(const std::filesystem::path& p);
  /// BLD_PORT, BLD_MODEL_DIR, BLD_DATA_DIR and BLD_JOB_CAP override file values.
  void apply_env();
};

/// Content-addressed byte store: each blob lives at blobs/<sha256>.png.
class BlobStore {
 public:
  explicit BlobStore(std::filesystem::path root);
  std::string put(const std::vector<std::uint8_t>& bytes);
  std::vector<std::uint8_t> get(const std::string& hash) const;
  bool has(const std::string& hash) const;

 private:
  std::filesystem::path path_of(const std::string& hash) const;
  std::filesystem::path root_;
};

/// One edit as submitted: everything needed to rerun it bit-exactly.
struct EditRequest {
  std::string base_blob;  // image the edit runs on (a scribbled image when one was uploaded)
  bool scribbled = false;  // base_blob was uploaded with the edit rather than taken from the session
  std::string mask_blob;
  std::string prompt;
  EditConfig config;

  nlohmann::json to_json() const;
  static EditRequest from_json(const nlohmann::json& j);
};

enum class JobStatus { queued, running, done, failed };
std::string to_string(JobStatus s);

struct Candidate {
  int index = 0;  // position in the generated batch
  double score = 0.0;
  std::string blob;
};

struct Job {
  std::string id;
  std::string session_id;
  JobStatus status = JobStatus::queued;
  std::string error;
  EditRequest request;
  std::string parent_blob;        // session image when the job was submitted
  std::vector<Candidate> ranked;  // best first

  nlohmann::json to_json() const;
  static Job from_json(const nlohmann::json& j);
};

struct HistoryEntry {
  std::string job_id;
  EditRequest request;
  int rank = 0;  // accepted position in the ranked batch
  std::string result_blob;
};

struct Session {
  std::string id;
  std::string original_blob;
  std::string current_blob;
  bool rescaled = false;
  std::string created_at;
  std::string updated_at;
  std::vector<HistoryEntry> history;
  std::map<std::string, Job> jobs;

  nlohmann::json to_json() const;
  static Session from_json(const nlohmann::json& j);
};

/// Raised by service operations; carries the HTTP status it maps to.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

/// Reruns an edit request on its stored base image and returns the ranked candidate images.
std::vector<Image> run_edit_request(const ModelBundle& models, const BlobStore& blobs, const EditRequest& req);
/// As above on a given base image.
std::vector<Image> run_edit_request(const ModelBundle& models, const BlobStore& blobs, const EditRequest& req,
                                    const Image& base);

/// Rebuilds a session's current image from its original image by rerunning every accepted edit in order. Each edit
/// runs on the image the previous replayed step produced, or on its uploaded scribble.
Image replay_session(const ModelBundle& models, const BlobStore& blobs, const Session& s);

/// Session store, job queue and HTTP front end.
class Service {
 public:
  Service(ServiceConfig cfg, std::shared_ptr<const ModelBundle> models);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Library-level API; the HTTP handlers are thin wrappers over these.
  std::string create_session(const std::vector<std::uint8_t>& png);
  std::string submit_edit(const std::string& session_id, const std::vector<std::uint8_t>& mask_png,
                          const std::string& prompt, const nlohmann::json& options,
                          const std::optional<std::vector<std::uint8_t>>& image_png = std::nullopt);
  Job job(const std::string& job_id) const;
  Session accept(const std::string& session_id, const std::string& job_id, int rank);
  Session session(const std::string& session_id) const;
  /// Replays the history and reports whether it reproduces the stored current image.
  nlohmann::json replay(const std::string& session_id) const;
  /// Blocks until the job leaves the queue or the timeout (seconds) passes.
  Job wait(const std::string& job_id, double timeout_seconds) const;
  const BlobStore& blobs() const { return blobs_; }

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  void stop();

 private:
  struct SessionSlot {
    std::mutex mu;
    Session data;
  };

  std::shared_ptr<SessionSlot> slot(const std::string& id) const;
  void persist(const Session& s) const;
  void load_all();
  void enqueue(const std::string& job_id);
  void worker();
  void run_job(const std::string& job_id);
  void install_routes();

  ServiceConfig cfg_;
  std::shared_ptr<const ModelBundle> models_;
  BlobStore blobs_;

  mutable std::mutex mu_;  // guards sessions_ and job_owner_
  std::map<std::string, std::shared_ptr<SessionSlot>> sessions_;
  std::map<std::string, std::string> job_owner_;

  mutable std::mutex queue_mu_;
  mutable std::condition_variable queue_cv_;
  std::deque<std::string> queue_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;

  std::unique_ptr<httplib::Server> server_;
  std::thread server_thread_;
};

}  // namespace bld
