#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <opencv2/core.hpp>

#include "vialguard/data.hpp"
#include "vialguard/metrics.hpp"

namespace vialguard {

class Model;

using Clock = std::chrono::system_clock;

struct AlertPolicy {
  double failure_score_threshold = 0.5;
  int consecutive_frames_required = 1;
  double cooldown_seconds = 30.0;

  void validate() const;
};

struct VialReport {
  Label cls = Label::failure;
  std::optional<FailureMode> failure_mode;
  BoundingBox box;  // pixels
  double score = 0.0;

  bool operator==(const VialReport&) const = default;
};

struct AlertEvent {
  Clock::time_point event_time;
  std::string frame_id;
  std::vector<VialReport> vials;
  std::vector<std::uint8_t> image_png;
  bool halt_issued = false;

  bool operator==(const AlertEvent&) const = default;
};

// UTF-8 JSON document: event_time (RFC 3339, UTC), frame_id, halt_issued,
// vials [{class, failure_mode, box, score}], image (base64 PNG).
std::string to_payload(const AlertEvent& event);
AlertEvent event_from_payload(const std::string& payload);

std::string format_rfc3339(Clock::time_point t);
Clock::time_point parse_rfc3339(const std::string& text);

struct FrameInfo {
  std::string id;
  Clock::time_point time;
};

struct StreamState {
  int streak = 0;  // consecutive frames with a qualifying failure
  std::optional<Clock::time_point> last_alert;
  std::optional<Clock::time_point> last_event_time;
  std::int64_t frames = 0;

  bool operator==(const StreamState&) const = default;
};

struct Decision {
  bool halt = false;
  std::optional<AlertEvent> event;  // present iff halt
};

struct DecideResult {
  Decision decision;
  StreamState state;
};

// Pure: the same (detections, policy, state, frame) always yields the same
// result. Halts when a failure detection scoring at or above the threshold
// has been seen for the required number of consecutive frames and the
// cooldown since the previous alert has elapsed. An alert resets the streak.
DecideResult decide(const std::vector<Detection>& dets, const AlertPolicy& policy, const StreamState& state,
                    const FrameInfo& frame);

enum class DeliveryStatus { delivered, retried_then_delivered, failed };
std::string_view to_string(DeliveryStatus status);

struct DeliveryResult {
  std::string transport;
  DeliveryStatus status = DeliveryStatus::failed;
  int attempts = 0;
  std::chrono::duration<double> latency{0.0};
  std::string last_error;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string id() const = 0;
  // One delivery attempt. Returns an empty string on success, else the error.
  virtual std::string send(const std::string& payload) = 0;
};

struct HttpEndpoint {
  std::string host = "127.0.0.1";
  int port = 80;
  std::string path = "/";
  std::string bearer_token;
  double timeout_seconds = 5.0;

  // "http://host[:port][/path]"
  static HttpEndpoint parse(const std::string& url);
};

// POST with content-type application/json; any 2xx status is a delivery.
class HttpTransport : public Transport {
 public:
  explicit HttpTransport(HttpEndpoint endpoint) : endpoint_(std::move(endpoint)) {}
  std::string id() const override;
  std::string send(const std::string& payload) override;

 private:
  HttpEndpoint endpoint_;
};

// Raw TCP: 4-byte big-endian length, then the payload bytes.
class SocketTransport : public Transport {
 public:
  SocketTransport(std::string host, int port, double timeout_seconds = 5.0)
      : host_(std::move(host)), port_(port), timeout_(timeout_seconds) {}
  std::string id() const override;
  std::string send(const std::string& payload) override;

 private:
  std::string host_;
  int port_;
  double timeout_;
};

std::vector<std::uint8_t> frame_message(const std::string& payload);

struct RetryPolicy {
  int max_attempts = 3;
  double initial_backoff_seconds = 0.5;
  double backoff_multiplier = 2.0;
};

// Append-only JSON-lines log. All writes go through one writer thread.
class IncidentLog {
 public:
  explicit IncidentLog(std::filesystem::path path);
  ~IncidentLog();
  IncidentLog(const IncidentLog&) = delete;
  IncidentLog& operator=(const IncidentLog&) = delete;

  const std::filesystem::path& path() const { return path_; }
  // Queues one record (a single-line JSON object) for the writer.
  void append(std::string json_line);
  // Blocks until every queued record is on disk.
  void flush();

  static std::vector<std::string> read_lines(const std::filesystem::path& path);

 private:
  void run();

  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable drained_;
  std::deque<std::string> queue_;
  bool stopping_ = false;
  bool busy_ = false;
  std::thread writer_;
};

// Sends with bounded retries and exponential backoff, then records the
// outcome (with the full event payload) in the log when one is given.
DeliveryResult dispatch_alert(const AlertEvent& event, Transport& transport, const RetryPolicy& retry = {},
                              IncidentLog* log = nullptr);

// Events whose dispatch failed, recovered from an incident log for replay.
std::vector<AlertEvent> failed_events(const std::filesystem::path& log_path);

struct Frame {
  FrameInfo info;
  cv::Mat image;  // empty when the frame could not be read
  std::string error;
};

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  // nullopt when the stream is exhausted.
  virtual std::optional<Frame> next() = 0;
};

// PNG files of a directory in lexicographic order.
class DirectoryFrameSource : public FrameSource {
 public:
  explicit DirectoryFrameSource(const std::filesystem::path& dir);
  std::optional<Frame> next() override;

 private:
  std::vector<std::filesystem::path> files_;
  std::size_t pos_ = 0;
};

// Halt signals flow out to the hardware controller; operator commands
// (resume, stop) flow in.
class ControlChannel {
 public:
  void emit_halt(const std::string& frame_id);
  std::vector<std::string> halts() const;
  // Blocks until a halt has been emitted beyond `seen` halts, or timeout.
  bool wait_for_halt(std::size_t seen, std::chrono::milliseconds timeout) const;

  void resume();
  void stop();
  bool stopped() const;
  // Blocks until resume() or stop(); consumes one resume. Returns false on stop.
  bool wait_for_resume();

 private:
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::vector<std::string> halts_;
  int pending_resumes_ = 0;
  bool stop_ = false;
};

struct WatchStats {
  int frames = 0;
  int continues = 0;
  int halts = 0;
  int alerts = 0;
  int skipped = 0;
  std::vector<DeliveryResult> deliveries;
  std::vector<std::string> transitions;  // human-readable state changes
};

using Detector = std::function<std::vector<Detection>(const cv::Mat&)>;

// Per frame: detect, decide; on halt the signal is emitted before the
// alert is dispatched (asynchronously), then intake pauses until resume.
// Unreadable frames are skipped and counted. Returns when the source is
// exhausted or a stop command arrives.
WatchStats watch(FrameSource& source, const Detector& detector, const AlertPolicy& policy, Transport& transport,
                 ControlChannel& control, IncidentLog& log, const RetryPolicy& retry = {});

Detector model_detector(const Model& model, double score_threshold = 0.3);

}  // namespace vialguard
