#include "bld/service.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <random>

#include "bld/checkpoint.hpp"

namespace bld {

namespace fs = std::filesystem;
using nlohmann::json;

ServiceConfig ServiceConfig::from_json(const json& j) {
  ServiceConfig c;
  c.host = j.value("host", c.host);
  c.port = j.value("port", c.port);
  c.model_dir = j.value("model_dir", c.model_dir.string());
  c.data_dir = j.value("data_dir", c.data_dir.string());
  c.job_cap = j.value("job_cap", c.job_cap);
  c.image_size = j.value("image_size", c.image_size);
  c.max_batch = j.value("max_batch", c.max_batch);
  if (j.contains("edit")) c.defaults = EditConfig::from_json(j.at("edit"), c.defaults);
  return c;
}

ServiceConfig ServiceConfig::from_file(const fs::path& p) {
  const auto bytes = read_file(p);
  try {
    return from_json(json::parse(bytes.begin(), bytes.end()));
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + p.string() + ": " + e.what());
  }
}

void ServiceConfig::apply_env() {
  const auto int_env = [](const char* name, int& out) {
    if (const char* v = std::getenv(name)) {
      try {
        out = std::stoi(v);
      } catch (const std::exception&) {
        throw std::invalid_argument(std::string(name) + " is not an integer: " + v);
      }
    }
  };
  int_env("BLD_PORT", port);
  int_env("BLD_JOB_CAP", job_cap);
  if (const char* v = std::getenv("BLD_MODEL_DIR")) model_dir = v;
  if (const char* v = std::getenv("BLD_DATA_DIR")) data_dir = v;
  if (job_cap < 1) throw std::invalid_argument("job cap must be >= 1");
}

BlobStore::BlobStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

fs::path BlobStore::path_of(const std::string& hash) const {
  if (hash.size() != 64 || hash.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw ServiceError(400, "malformed blob id '" + hash + "'");
  }
  return root_ / (hash + ".png");
}

std::string BlobStore::put(const std::vector<std::uint8_t>& bytes) {
  const std::string hash = sha256_hex(bytes);
  const fs::path p = path_of(hash);
  if (!fs::exists(p)) {
    const fs::path tmp = p.string() + ".tmp";
    write_file(tmp, bytes);
    fs::rename(tmp, p);
  }
  return hash;
}

std::vector<std::uint8_t> BlobStore::get(const std::string& hash) const {
  const fs::path p = path_of(hash);
  if (!fs::exists(p)) throw ServiceError(404, "unknown blob " + hash);
  return read_file(p);
}

bool BlobStore::has(const std::string& hash) const { return fs::exists(path_of(hash)); }

json EditRequest::to_json() const {
  return {{"base", base_blob},
          {"scribbled", scribbled},
          {"mask", mask_blob},
          {"prompt", prompt},
          {"config", config.to_json()}};
}

EditRequest EditRequest::from_json(const json& j) {
  return {j.at("base").get<std::string>(), j.value("scribbled", false), j.at("mask").get<std::string>(),
          j.at("prompt").get<std::string>(), EditConfig::from_json(j.at("config"), {})};
}

std::string to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued: return "queued";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
  }
  return "failed";
}

namespace {

JobStatus parse_status(const std::string& s) {
  if (s == "queued") return JobStatus::queued;
  if (s == "running") return JobStatus::running;
  if (s == "done") return JobStatus::done;
  return JobStatus::failed;
}

std::string now_iso() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string random_id() {
  static std::mutex mu;
  static std::mt19937_64 rng(std::random_device{}() ^
                             static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()));
  std::lock_guard lock(mu);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng()),
                static_cast<unsigned long long>(rng()));
  return buf;
}

}  // namespace

json Job::to_json() const {
  json cands = json::array();
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    cands.push_back({{"rank", r}, {"index", ranked[r].index}, {"score", ranked[r].score}, {"blob", ranked[r].blob}});
  }
  json j = {{"id", id},
            {"session_id", session_id},
            {"status", bld::to_string(status)},
            {"request", request.to_json()},
            {"parent", parent_blob},
            {"candidates", cands}};
  if (!error.empty()) j["error"] = error;
  return j;
}

Job Job::from_json(const json& j) {
  Job job;
  job.id = j.at("id").get<std::string>();
  job.session_id = j.at("session_id").get<std::string>();
  job.status = parse_status(j.at("status").get<std::string>());
  job.error = j.value("error", std::string());
  job.request = EditRequest::from_json(j.at("request"));
  job.parent_blob = j.value("parent", job.request.base_blob);
  for (const auto& c : j.at("candidates")) {
    job.ranked.push_back({c.at("index").get<int>(), c.at("score").get<double>(), c.at("blob").get<std::string>()});
  }
  return job;
}

json Session::to_json() const {
  json hist = json::array();
  for (const auto& h : history) {
    hist.push_back({{"job_id", h.job_id}, {"request", h.request.to_json()}, {"rank", h.rank}, {"result", h.result_blob}});
  }
  json js = json::object();
  for (const auto& [id, job] : jobs) js[id] = job.to_json();
  return {{"id", id},
          {"original", original_blob},
          {"current", current_blob},
          {"rescaled", rescaled},
          {"created_at", created_at},
          {"updated_at", updated_at},
          {"history", hist},
          {"jobs", js}};
}

Session Session::from_json(const json& j) {
  Session s;
  s.id = j.at("id").get<std::string>();
  s.original_blob = j.at("original").get<std::string>();
  s.current_blob = j.at("current").get<std::string>();
  s.rescaled = j.value("rescaled", false);
  s.created_at = j.value("created_at", std::string());
  s.updated_at = j.value("updated_at", std::string());
  for (const auto& h : j.at("history")) {
    s.history.push_back({h.at("job_id").get<std::string>(), EditRequest::from_json(h.at("request")),
                         h.at("rank").get<int>(), h.at("result").get<std::string>()});
  }
  for (const auto& [id, job] : j.at("jobs").items()) s.jobs.emplace(id, Job::from_json(job));
  return s;
}

std::vector<Image> run_edit_request(const ModelBundle& models, const BlobStore& blobs, const EditRequest& req) {
  return run_edit_request(models, blobs, req, decode_png(blobs.get(req.base_blob)));
}

std::vector<Image> run_edit_request(const ModelBundle& models, const BlobStore& blobs, const EditRequest& req,
                                    const Image& base) {
  const Mask m = decode_mask_png(blobs.get(req.mask_blob));
  return edit_and_rank(models, base, m, Prompt::parse(req.prompt), req.config).images_by_rank();
}

Image replay_session(const ModelBundle& models, const BlobStore& blobs, const Session& s) {
  Image current = decode_png(blobs.get(s.original_blob));
  for (const HistoryEntry& h : s.history) {
    const Image base = h.request.scribbled ? decode_png(blobs.get(h.request.base_blob)) : current;
    // stored images are 8-bit PNGs, so each replayed result is requantized the same way
    current = decode_png(encode_png(run_edit_request(models, blobs, h.request, base).at(static_cast<std::size_t>(h.rank))));
  }
  return current;
}

Service::Service(ServiceConfig cfg, std::shared_ptr<const ModelBundle> models)
    : cfg_(std::move(cfg)), models_(std::move(models)), blobs_(cfg_.data_dir / "blobs") {
  if (!models_) throw std::invalid_argument("service needs a model bundle");
  if (cfg_.job_cap < 1) throw std::invalid_argument("job cap must be >= 1");
  fs::create_directories(cfg_.data_dir / "sessions");
  load_all();
  for (int i = 0; i < cfg_.job_cap; ++i) workers_.emplace_back([this] { worker(); });
}

Service::~Service() {
  stop();
  {
    std::lock_guard lock(queue_mu_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  for (auto& t : workers_) t.join();
}

std::shared_ptr<Service::SessionSlot> Service::slot(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "unknown session " + id);
  return it->second;
}

void Service::persist(const Session& s) const {
  const std::string text = s.to_json().dump(2) + "\n";
  const fs::path p = cfg_.data_dir / "sessions" / (s.id + ".json");
  const fs::path tmp = p.string() + ".tmp";
  write_file(tmp, std::vector<std::uint8_t>(text.begin(), text.end()));
  fs::rename(tmp, p);
}

void Service::load_all() {
  std::vector<std::string> pending;
  for (const auto& entry : fs::directory_iterator(cfg_.data_dir / "sessions")) {
    if (entry.path().extension() != ".json") continue;
    const auto bytes = read_file(entry.path());
    auto s = std::make_shared<SessionSlot>();
    s->data = Session::from_json(json::parse(bytes.begin(), bytes.end()));
    for (auto& [id, job] : s->data.jobs) {
      job_owner_[id] = s->data.id;
      if (job.status == JobStatus::queued || job.status == JobStatus::running) {
        job.status = JobStatus::queued;
        pending.push_back(id);
      }
    }
    sessions_[s->data.id] = s;
  }
  std::sort(pending.begin(), pending.end());
  for (const auto& id : pending) queue_.push_back(id);
}

std::string Service::create_session(const std::vector<std::uint8_t>& png) {
  Image img;
  try {
    img = decode_png(png);
  } catch (const ImageIoError& e) {
    throw ServiceError(400, std::string("undecodable image: ") + e.what());
  }
  Session s;
  if (img.height() != cfg_.image_size || img.width() != cfg_.image_size) {
    img = resize(img, cfg_.image_size, cfg_.image_size).clamped();
    s.rescaled = true;
  }
  s.id = random_id();
  s.original_blob = blobs_.put(encode_png(img));
  s.current_blob = s.original_blob;
  s.created_at = s.updated_at = now_iso();
  auto sl = std::make_shared<SessionSlot>();
  sl->data = s;
  persist(s);
  std::lock_guard lock(mu_);
  sessions_[s.id] = sl;
  return s.id;
}

std::string Service::submit_edit(const std::string& session_id, const std::vector<std::uint8_t>& mask_png,
                                 const std::string& prompt, const json& options,
                                 const std::optional<std::vector<std::uint8_t>>& image_png) {
  const auto sl = slot(session_id);
  Mask m;
  try {
    m = decode_mask_png(mask_png);
  } catch (const ImageIoError& e) {
    throw ServiceError(400, std::string("undecodable mask: ") + e.what());
  }
  if (m.height() != cfg_.image_size || m.width() != cfg_.image_size) {
    throw ServiceError(400, "mask is " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                                ", session image is " + std::to_string(cfg_.image_size) + "x" +
                                std::to_string(cfg_.image_size));
  }
  try {
    Prompt::parse(prompt);
  } catch (const UnknownPrompt& e) {
    throw ServiceError(400, e.what());
  }
  EditConfig ec;
  try {
    ec = EditConfig::from_json(options, cfg_.defaults);
    ec.validate(models_->schedule(1));
  } catch (const std::invalid_argument& e) {
    throw ServiceError(400, e.what());
  }
  if (ec.batch_size > cfg_.max_batch) {
    throw ServiceError(400, "batch " + std::to_string(ec.batch_size) + " exceeds the limit " + std::to_string(cfg_.max_batch));
  }
  std::string base;
  if (image_png) {
    Image scribbled;
    try {
      scribbled = decode_png(*image_png);
    } catch (const ImageIoError& e) {
      throw ServiceError(400, std::string("undecodable image: ") + e.what());
    }
    if (scribbled.height() != cfg_.image_size || scribbled.width() != cfg_.image_size) {
      throw ServiceError(400, "submitted image size differs from the session image");
    }
    base = blobs_.put(encode_png(scribbled));
  }

  Job job;
  job.id = random_id();
  job.session_id = session_id;
  job.request = {base, image_png.has_value(), blobs_.put(encode_mask_png(m)), prompt, ec};
  {
    std::lock_guard lock(sl->mu);
    job.parent_blob = sl->data.current_blob;
    if (job.request.base_blob.empty()) job.request.base_blob = job.parent_blob;
    sl->data.jobs[job.id] = job;
    sl->data.updated_at = now_iso();
    persist(sl->data);
  }
  {
    std::lock_guard lock(mu_);
    job_owner_[job.id] = session_id;
  }
  enqueue(job.id);
  return job.id;
}

void Service::enqueue(const std::string& job_id) {
  {
    std::lock_guard lock(queue_mu_);
    queue_.push_back(job_id);
  }
  queue_cv_.notify_all();
}

void Service::worker() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(queue_mu_);
      queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
    }
    run_job(id);
    queue_cv_.notify_all();
  }
}

void Service::run_job(const std::string& job_id) {
  std::string owner;
  {
    std::lock_guard lock(mu_);
    owner = job_owner_.at(job_id);
  }
  const auto sl = slot(owner);
  EditRequest req;
  {
    std::lock_guard lock(sl->mu);
    Job& job = sl->data.jobs.at(job_id);
    job.status = JobStatus::running;
    req = job.request;
  }
  std::vector<Candidate> ranked;
  std::string error;
  try {
    const Image x = decode_png(blobs_.get(req.base_blob));
    const Mask m = decode_mask_png(blobs_.get(req.mask_blob));
    const RankedEdit r = edit_and_rank(*models_, x, m, Prompt::parse(req.prompt), req.config);
    for (int idx : r.ranking.order) {
      const auto& cand = r.edit.candidates[static_cast<std::size_t>(idx)];
      ranked.push_back({idx, r.ranking.scores[static_cast<std::size_t>(idx)], blobs_.put(encode_png(cand.image))});
    }
  } catch (const std::exception& e) {
    error = e.what();
  }
  std::lock_guard lock(sl->mu);
  Job& job = sl->data.jobs.at(job_id);
  job.status = error.empty() ? JobStatus::done : JobStatus::failed;
  job.error = error;
  job.ranked = std::move(ranked);
  sl->data.updated_at = now_iso();
  persist(sl->data);
}

Job Service::job(const std::string& job_id) const {
  std::string owner;
  {
    std::lock_guard lock(mu_);
    const auto it = job_owner_.find(job_id);
    if (it == job_owner_.end()) throw ServiceError(404, "unknown job " + job_id);
    owner = it->second;
  }
  const auto sl = slot(owner);
  std::lock_guard lock(sl->mu);
  return sl->data.jobs.at(job_id);
}

Job Service::wait(const std::string& job_id, double timeout_seconds) const {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
  for (;;) {
    Job j = job(job_id);
    if (j.status == JobStatus::done || j.status == JobStatus::failed) return j;
    std::unique_lock lock(queue_mu_);
    if (queue_cv_.wait_until(lock, deadline) == std::cv_status::timeout) return job(job_id);
  }
}

Session Service::accept(const std::string& session_id, const std::string& job_id, int rank) {
  const auto sl = slot(session_id);
  std::lock_guard lock(sl->mu);
  Session& s = sl->data;
  const auto it = s.jobs.find(job_id);
  if (it == s.jobs.end()) throw ServiceError(404, "job " + job_id + " does not belong to session " + session_id);
  const Job& job = it->second;
  if (job.status == JobStatus::queued || job.status == JobStatus::running) throw ServiceError(409, "job is still pending");
  if (job.status == JobStatus::failed) throw ServiceError(409, "job failed: " + job.error);
  if (rank < 0 || rank >= static_cast<int>(job.ranked.size())) {
    throw ServiceError(400, "candidate index " + std::to_string(rank) + " out of range");
  }
  if (job.parent_blob != s.current_blob) throw ServiceError(409, "job ran on an image the session has moved past");
  s.history.push_back({job_id, job.request, rank, job.ranked[static_cast<std::size_t>(rank)].blob});
  s.current_blob = s.history.back().result_blob;
  s.updated_at = now_iso();
  persist(s);
  return s;
}

Session Service::session(const std::string& session_id) const {
  const auto sl = slot(session_id);
  std::lock_guard lock(sl->mu);
  return sl->data;
}

json Service::replay(const std::string& session_id) const {
  const Session s = session(session_id);
  const Image img = replay_session(*models_, blobs_, s);
  const std::string replayed = sha256_hex(encode_png(img));
  return {{"session_id", s.id}, {"steps", s.history.size()}, {"current", s.current_blob}, {"replayed", replayed},
          {"match", replayed == s.current_blob}};
}

namespace {

json session_view(const Session& s) {
  json j = s.to_json();
  j["current_url"] = "/blobs/" + s.current_blob;
  return j;
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) { send_json(res, status, {{"error", msg}}); }

std::vector<std::uint8_t> as_bytes(const std::string& s) { return {s.begin(), s.end()}; }

/// A multipart part, or the raw body when the request is not multipart.
std::optional<std::string> part(const httplib::Request& req, const std::string& name) {
  if (req.has_file(name)) return req.get_file_value(name).content;
  return std::nullopt;
}

}  // namespace

void Service::install_routes() {
  auto& srv = *server_;
  const auto guard = [](httplib::Response& res, const auto& fn) {
    try {
      fn();
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, std::string("bad JSON: ") + e.what());
    } catch (const std::invalid_argument& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };

  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"ok", true}}); });

  srv.Post("/sessions", [this, guard](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] {
      std::optional<std::string> png = part(req, "image");
      if (!png && !req.is_multipart_form_data()) png = req.body;
      if (!png) throw ServiceError(400, "missing 'image' part");
      const std::string id = create_session(as_bytes(*png));
      send_json(res, 200, session_view(session(id)));
    });
  });

  srv.Get(R"(/sessions/([0-9a-f]+))", [this, guard](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] { send_json(res, 200, session_view(session(req.matches[1]))); });
  });

  srv.Post(R"(/sessions/([0-9a-f]+)/edits)", [this, guard](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] {
      const std::string sid = req.matches[1];
      slot(sid);
      const auto mask = part(req, "mask");
      const auto prompt = part(req, "prompt");
      if (!mask) throw ServiceError(400, "missing 'mask' part");
      if (!prompt) throw ServiceError(400, "missing 'prompt' part");
      const auto opts = part(req, "options");
      const json options = opts && !opts->empty() ? json::parse(*opts) : json::object();
      std::optional<std::vector<std::uint8_t>> image;
      if (const auto img = part(req, "image")) image = as_bytes(*img);
      const std::string job_id = submit_edit(sid, as_bytes(*mask), *prompt, options, image);
      send_json(res, 202, {{"job_id", job_id}, {"status_url", "/jobs/" + job_id}});
    });
  });

  srv.Get(R"(/jobs/([0-9a-f]+))", [this, guard](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] {
      json j = job(req.matches[1]).to_json();
      for (auto& c : j["candidates"]) c["url"] = "/blobs/" + c["blob"].get<std::string>();
      send_json(res, 200, j);
    });
  });

  srv.Post(R"(/sessions/([0-9a-f]+)/accept)", [this, guard](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] {
      const json body = json::parse(req.body);
      const Session s = accept(req.matches[1], body.at("job_id").get<std::string>(), body.at("index").get<int>());
      send_json(res, 200, session_view(s));
    });
  });

  srv.Post(R"(/sessions/([0-9a-f]+)/replay)", [this, guard](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] { send_json(res, 200, replay(req.matches[1])); });
  });

  srv.Get(R"(/blobs/([0-9a-f]{64}))", [this, guard](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] {
      const auto bytes = blobs_.get(req.matches[1]);
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    });
  });
}

int Service::start() {
  if (server_) throw std::logic_error("service already started");
  server_ = std::make_unique<httplib::Server>();
  server_->set_payload_max_length(16u << 20);
  install_routes();
  int port = cfg_.port;
  if (port == 0) {
    port = server_->bind_to_any_port(cfg_.host);
  } else if (!server_->bind_to_port(cfg_.host, port)) {
    port = -1;
  }
  if (port < 0) {
    server_.reset();
    throw std::runtime_error("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  }
  server_thread_ = std::thread([this] { server_->listen_after_bind(); });
  return port;
}

void Service::stop() {
  if (!server_) return;
  server_->stop();
  if (server_thread_.joinable()) server_thread_.join();
  server_.reset();
}

}  // namespace bld
