#include "vialguard/sentinel.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <ctime>
#include <future>

#include <fmt/format.h>
#include <httplib.h>
#include <json.hpp>
#include <sodium.h>

#include "vialguard/errors.hpp"
#include "vialguard/pipeline.hpp"

namespace vialguard {

using nlohmann::ordered_json;

void AlertPolicy::validate() const {
  if (!(failure_score_threshold > 0.0 && failure_score_threshold <= 1.0)) {
    throw ConfigError("failure_score_threshold must lie in (0, 1]");
  }
  if (consecutive_frames_required < 1) throw ConfigError("consecutive_frames_required must be at least 1");
  if (!(cooldown_seconds >= 0.0) || !std::isfinite(cooldown_seconds)) {
    throw ConfigError("cooldown_seconds must be a finite non-negative number");
  }
}

std::string format_rfc3339(Clock::time_point t) {
  const auto us = std::chrono::duration_cast<std::chrono::microseconds>(t.time_since_epoch()).count();
  std::time_t secs = static_cast<std::time_t>(us / 1000000);
  long frac = static_cast<long>(us % 1000000);
  if (frac < 0) {
    frac += 1000000;
    --secs;
  }
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  return fmt::format("{}.{:06d}Z", buf, frac);
}

Clock::time_point parse_rfc3339(const std::string& text) {
  std::tm tm{};
  const char* rest = strptime(text.c_str(), "%Y-%m-%dT%H:%M:%S", &tm);
  if (rest == nullptr) throw ParseError("bad RFC 3339 timestamp: " + text);
  long micros = 0;
  if (*rest == '.') {
    ++rest;
    int digits = 0;
    while (*rest >= '0' && *rest <= '9') {
      if (digits < 6) {
        micros = micros * 10 + (*rest - '0');
        ++digits;
      }
      ++rest;
    }
    while (digits++ < 6) micros *= 10;
  }
  if (*rest != 'Z') throw ParseError("timestamp must be UTC ('Z'): " + text);
  const std::time_t secs = timegm(&tm);
  return Clock::time_point(std::chrono::seconds(secs)) + std::chrono::microseconds(micros);
}

namespace {

std::string base64(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty()) return {};
  const std::size_t len = sodium_base64_encoded_len(bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  std::string out(len, '\0');
  sodium_bin2base64(out.data(), len, bytes.data(), bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  out.resize(len - 1);  // drop the terminator
  return out;
}

std::vector<std::uint8_t> unbase64(const std::string& text) {
  std::vector<std::uint8_t> out(text.size());
  std::size_t len = 0;
  if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &len, nullptr,
                        sodium_base64_VARIANT_ORIGINAL) != 0) {
    throw ParseError("alert payload image is not valid base64");
  }
  out.resize(len);
  return out;
}

ordered_json event_json(const AlertEvent& e) {
  ordered_json j;
  j["event_time"] = format_rfc3339(e.event_time);
  j["frame_id"] = e.frame_id;
  j["halt_issued"] = e.halt_issued;
  auto vials = ordered_json::array();
  for (const auto& v : e.vials) {
    vials.push_back({{"class", std::string(to_string(v.cls))},
                     {"failure_mode", v.failure_mode ? ordered_json(std::string(to_string(*v.failure_mode)))
                                                     : ordered_json(nullptr)},
                     {"box", {v.box.x_min, v.box.y_min, v.box.x_max, v.box.y_max}},
                     {"score", v.score}});
  }
  j["vials"] = std::move(vials);
  j["image"] = base64(e.image_png);
  return j;
}

AlertEvent event_from_json(const ordered_json& j) {
  AlertEvent e;
  e.event_time = parse_rfc3339(j.at("event_time"));
  e.frame_id = j.at("frame_id");
  e.halt_issued = j.at("halt_issued");
  for (const auto& v : j.at("vials")) {
    VialReport r;
    r.cls = label_from_string(v.at("class").get<std::string>());
    if (!v.at("failure_mode").is_null()) r.failure_mode = failure_mode_from_string(v.at("failure_mode").get<std::string>());
    const auto box = v.at("box").get<std::vector<double>>();
    if (box.size() != 4) throw ParseError("alert payload box must have four coordinates");
    r.box.x_min = box[0];
    r.box.y_min = box[1];
    r.box.x_max = box[2];
    r.box.y_max = box[3];
    r.box.label = r.cls;
    r.score = v.at("score");
    e.vials.push_back(r);
  }
  e.image_png = unbase64(j.at("image"));
  return e;
}

}  // namespace

std::string to_payload(const AlertEvent& event) {
  if (sodium_init() < 0) throw std::runtime_error("libsodium failed to initialize");
  return event_json(event).dump();
}

AlertEvent event_from_payload(const std::string& payload) {
  if (sodium_init() < 0) throw std::runtime_error("libsodium failed to initialize");
  try {
    return event_from_json(ordered_json::parse(payload));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed alert payload: ") + e.what());
  }
}

DecideResult decide(const std::vector<Detection>& dets, const AlertPolicy& policy, const StreamState& state,
                    const FrameInfo& frame) {
  DecideResult out;
  out.state = state;
  out.state.frames += 1;

  const bool qualifying = std::any_of(dets.begin(), dets.end(), [&](const Detection& d) {
    return d.label == Label::failure && d.score.value_or(0.0) >= policy.failure_score_threshold;
  });
  out.state.streak = qualifying ? state.streak + 1 : 0;
  if (out.state.streak < policy.consecutive_frames_required) return out;

  // A wall clock that steps backwards reads as no time elapsed.
  const Clock::time_point now = state.last_event_time ? std::max(frame.time, *state.last_event_time) : frame.time;
  if (state.last_alert) {
    const std::chrono::duration<double> since = now - *state.last_alert;
    if (since.count() < policy.cooldown_seconds) return out;
  }

  AlertEvent event;
  event.event_time = now;
  event.frame_id = frame.id;
  for (const auto& d : dets) {
    if (d.label == Label::background) continue;
    VialReport v;
    v.cls = d.label;
    v.box = d;
    v.box.score.reset();
    v.score = d.score.value_or(0.0);
    event.vials.push_back(v);
  }
  out.decision.halt = true;
  out.decision.event = std::move(event);
  out.state.streak = 0;
  out.state.last_alert = now;
  out.state.last_event_time = out.decision.event->event_time;
  return out;
}

std::string_view to_string(DeliveryStatus status) {
  switch (status) {
    case DeliveryStatus::delivered:
      return "delivered";
    case DeliveryStatus::retried_then_delivered:
      return "retried_then_delivered";
    case DeliveryStatus::failed:
      return "failed";
  }
  return "failed";
}

HttpEndpoint HttpEndpoint::parse(const std::string& url) {
  const std::string scheme = "http://";
  if (url.rfind(scheme, 0) != 0) throw ConfigError("alert endpoint must start with http://: " + url);
  std::string rest = url.substr(scheme.size());
  HttpEndpoint ep;
  const auto slash = rest.find('/');
  if (slash != std::string::npos) {
    ep.path = rest.substr(slash);
    rest = rest.substr(0, slash);
  }
  const auto colon = rest.rfind(':');
  if (colon != std::string::npos) {
    try {
      ep.port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad port in alert endpoint: " + url);
    }
    rest = rest.substr(0, colon);
  }
  if (rest.empty()) throw ConfigError("alert endpoint has no host: " + url);
  ep.host = rest;
  return ep;
}

std::string HttpTransport::id() const {
  return fmt::format("http://{}:{}{}", endpoint_.host, endpoint_.port, endpoint_.path);
}

std::string HttpTransport::send(const std::string& payload) {
  httplib::Client client(endpoint_.host, endpoint_.port);
  const auto secs = static_cast<time_t>(endpoint_.timeout_seconds);
  const auto usecs = static_cast<time_t>((endpoint_.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!endpoint_.bearer_token.empty()) headers.emplace("Authorization", "Bearer " + endpoint_.bearer_token);
  auto res = client.Post(endpoint_.path, headers, payload, "application/json");
  if (!res) return "transport error: " + httplib::to_string(res.error());
  if (res->status < 200 || res->status >= 300) return fmt::format("HTTP status {}", res->status);
  return {};
}

std::vector<std::uint8_t> frame_message(const std::string& payload) {
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::vector<std::uint8_t> out{static_cast<std::uint8_t>(n >> 24), static_cast<std::uint8_t>(n >> 16),
                                static_cast<std::uint8_t>(n >> 8), static_cast<std::uint8_t>(n)};
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::string SocketTransport::id() const { return fmt::format("tcp://{}:{}", host_, port_); }

std::string SocketTransport::send(const std::string& payload) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = getaddrinfo(host_.c_str(), std::to_string(port_).c_str(), &hints, &res); rc != 0) {
    return std::string("resolve failed: ") + gai_strerror(rc);
  }
  std::string error = "connect failed";
  const int timeout_ms = static_cast<int>(timeout_ * 1000.0);
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_NONBLOCK, ai->ai_protocol);
    if (fd < 0) continue;
    int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
    if (rc < 0 && errno == EINPROGRESS) {
      pollfd p{fd, POLLOUT, 0};
      rc = ::poll(&p, 1, timeout_ms) == 1 ? 0 : -1;
      int so_error = 0;
      socklen_t len = sizeof so_error;
      if (rc == 0 && (::getsockopt(fd, SOL_SOCKET, SO_ERROR, &so_error, &len) != 0 || so_error != 0)) {
        errno = so_error;
        rc = -1;
      }
    }
    if (rc < 0) {
      error = std::string("connect failed: ") + std::strerror(errno);
      ::close(fd);
      continue;
    }
    const auto bytes = frame_message(payload);
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      pollfd p{fd, POLLOUT, 0};
      if (::poll(&p, 1, timeout_ms) != 1) {
        error = "send timed out";
        break;
      }
      const ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EAGAIN || errno == EINTR) continue;
        error = std::string("send failed: ") + std::strerror(errno);
        break;
      }
      sent += static_cast<std::size_t>(n);
    }
    bool accepted = sent == bytes.size();
    if (accepted) {
      // The frame carries no acknowledgement. Half-close and wait for the peer: a reset means the
      // receiver dropped the message, while an orderly close or continued silence means it was taken.
      ::shutdown(fd, SHUT_WR);
      pollfd p{fd, POLLIN, 0};
      while (::poll(&p, 1, timeout_ms) == 1) {
        char sink[256];
        const ssize_t n = ::recv(fd, sink, sizeof sink, 0);
        if (n > 0 || (n < 0 && errno == EINTR)) continue;
        if (n < 0) {
          error = std::string("receiver reset the connection: ") + std::strerror(errno);
          accepted = false;
        }
        break;
      }
    }
    ::close(fd);
    freeaddrinfo(res);
    return accepted ? std::string() : error;
  }
  freeaddrinfo(res);
  return error;
}

IncidentLog::IncidentLog(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  out_.open(path_, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open incident log " + path_.string());
  writer_ = std::thread([this] { run(); });
}

IncidentLog::~IncidentLog() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  writer_.join();
}

void IncidentLog::append(std::string json_line) {
  {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(json_line));
  }
  cv_.notify_all();
}

void IncidentLog::flush() {
  std::unique_lock lock(mu_);
  drained_.wait(lock, [&] { return queue_.empty() && !busy_; });
}

void IncidentLog::run() {
  std::unique_lock lock(mu_);
  for (;;) {
    cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
    while (!queue_.empty()) {
      std::string line = std::move(queue_.front());
      queue_.pop_front();
      busy_ = true;
      lock.unlock();
      out_ << line << '\n';
      out_.flush();
      lock.lock();
      busy_ = false;
    }
    drained_.notify_all();
    if (stopping_) return;
  }
}

std::vector<std::string> IncidentLog::read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

DeliveryResult dispatch_alert(const AlertEvent& event, Transport& transport, const RetryPolicy& retry,
                              IncidentLog* log) {
  const std::string payload = to_payload(event);
  DeliveryResult result;
  result.transport = transport.id();
  const auto start = std::chrono::steady_clock::now();
  double backoff = retry.initial_backoff_seconds;
  const int max_attempts = std::max(1, retry.max_attempts);
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    result.attempts = attempt;
    result.last_error = transport.send(payload);
    if (result.last_error.empty()) {
      result.status = attempt == 1 ? DeliveryStatus::delivered : DeliveryStatus::retried_then_delivered;
      break;
    }
    result.status = DeliveryStatus::failed;
    if (attempt < max_attempts) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= retry.backoff_multiplier;
    }
  }
  result.latency = std::chrono::steady_clock::now() - start;

  if (log) {
    ordered_json rec;
    rec["kind"] = "dispatch";
    rec["logged_at"] = format_rfc3339(Clock::now());
    rec["transport"] = result.transport;
    rec["status"] = std::string(to_string(result.status));
    rec["attempts"] = result.attempts;
    rec["latency_s"] = result.latency.count();
    rec["error"] = result.last_error;
    rec["event"] = ordered_json::parse(payload);
    log->append(rec.dump());
  }
  return result;
}

std::vector<AlertEvent> failed_events(const std::filesystem::path& log_path) {
  std::vector<AlertEvent> out;
  for (const auto& line : IncidentLog::read_lines(log_path)) {
    ordered_json rec;
    try {
      rec = ordered_json::parse(line);
    } catch (const nlohmann::json::exception&) {
      continue;
    }
    if (rec.value("kind", "") == "dispatch" && rec.value("status", "") == "failed") {
      out.push_back(event_from_json(rec.at("event")));
    }
  }
  return out;
}

DirectoryFrameSource::DirectoryFrameSource(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw MissingFileError("frame directory not found: " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files_.push_back(entry.path());
  }
  std::sort(files_.begin(), files_.end());
}

std::optional<Frame> DirectoryFrameSource::next() {
  if (pos_ >= files_.size()) return std::nullopt;
  const auto& path = files_[pos_++];
  Frame f;
  f.info.id = path.stem().string();
  f.info.time = Clock::now();
  try {
    f.image = read_png(path);
  } catch (const std::exception& e) {
    f.error = e.what();
  }
  return f;
}

void ControlChannel::emit_halt(const std::string& frame_id) {
  {
    std::lock_guard lock(mu_);
    halts_.push_back(frame_id);
  }
  cv_.notify_all();
}

std::vector<std::string> ControlChannel::halts() const {
  std::lock_guard lock(mu_);
  return halts_;
}

bool ControlChannel::wait_for_halt(std::size_t seen, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] { return halts_.size() > seen; });
}

void ControlChannel::resume() {
  {
    std::lock_guard lock(mu_);
    ++pending_resumes_;
  }
  cv_.notify_all();
}

void ControlChannel::stop() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
}

bool ControlChannel::stopped() const {
  std::lock_guard lock(mu_);
  return stop_;
}

bool ControlChannel::wait_for_resume() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return stop_ || pending_resumes_ > 0; });
  if (stop_) return false;
  --pending_resumes_;
  return true;
}

WatchStats watch(FrameSource& source, const Detector& detector, const AlertPolicy& policy, Transport& transport,
                 ControlChannel& control, IncidentLog& log, const RetryPolicy& retry) {
  policy.validate();
  WatchStats stats;
  StreamState state;
  std::vector<std::future<DeliveryResult>> pending;

  auto transition = [&](const std::string& kind, const std::string& frame_id, const std::string& detail) {
    ordered_json rec;
    rec["kind"] = kind;
    rec["logged_at"] = format_rfc3339(Clock::now());
    rec["frame_id"] = frame_id;
    if (!detail.empty()) rec["detail"] = detail;
    log.append(rec.dump());
    stats.transitions.push_back(kind + " " + frame_id);
  };

  while (!control.stopped()) {
    std::optional<Frame> frame = source.next();
    if (!frame) break;
    ++stats.frames;
    if (frame->image.empty()) {
      ++stats.skipped;
      transition("skip", frame->info.id, frame->error.empty() ? "unreadable frame" : frame->error);
      continue;
    }
    const std::vector<Detection> dets = detector(frame->image);
    DecideResult r = decide(dets, policy, state, frame->info);
    state = r.state;
    if (!r.decision.halt) {
      ++stats.continues;
      continue;
    }

    // Safety first: the halt goes out before any notification work starts.
    control.emit_halt(frame->info.id);
    ++stats.halts;
    transition("halt", frame->info.id, {});

    AlertEvent event = std::move(*r.decision.event);
    event.halt_issued = true;
    event.image_png = encode_png(frame->image);
    ++stats.alerts;
    pending.push_back(std::async(std::launch::async, [event = std::move(event), &transport, &retry, &log] {
      return dispatch_alert(event, transport, retry, &log);
    }));

    if (!control.wait_for_resume()) {
      transition("stop", frame->info.id, {});
      break;
    }
    transition("resume", frame->info.id, {});
  }
  for (auto& f : pending) stats.deliveries.push_back(f.get());
  log.flush();
  return stats;
}

Detector model_detector(const Model& model, double score_threshold) {
  return [&model, score_threshold](const cv::Mat& image) {
    return detect(model, image, NmsParams{}, score_threshold);
  };
}

}  // namespace vialguard
