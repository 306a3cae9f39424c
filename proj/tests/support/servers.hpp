#pragma once

#include <atomic>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace fixture {

// Loopback TCP server on an ephemeral port. The first `drop_first`
// connections are closed without reading or replying; later ones are
// served according to the protocol.
class FlakyServer {
 public:
  enum class Protocol {
    http,            // one HTTP/1.1 request per connection, answered with `status`
    length_prefixed  // 4-byte big-endian length, then the payload; no reply
  };

  FlakyServer(Protocol protocol, int drop_first, int status = 200);
  ~FlakyServer();
  FlakyServer(const FlakyServer&) = delete;
  FlakyServer& operator=(const FlakyServer&) = delete;

  int port() const { return port_; }
  int connections() const { return connections_; }
  std::vector<std::string> payloads() const;
  std::vector<std::string> headers() const;

 private:
  void serve();
  void handle(int fd);

  Protocol protocol_;
  int drop_first_;
  int status_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<int> connections_{0};
  std::atomic<bool> stopping_{false};
  mutable std::mutex mu_;
  std::vector<std::string> payloads_;
  std::vector<std::string> headers_;
  std::thread thread_;
};

// A loopback port with nothing listening on it.
int closed_port();

}  // namespace fixture
