#pragma once

#include <array>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "fedsurf/protocol.hpp"
#include "fedsurf/rsf.hpp"

namespace fedsurf {

using Clock = std::chrono::steady_clock;

inline constexpr std::size_t kMaxFrameBytes = std::size_t{64} << 20;

enum class MessageKind : std::uint8_t { Hello = 0x01, Quota = 0x02, TreeUpload = 0x03, Complete = 0x04, Error = 0x7F };

struct HelloMsg {
  std::uint32_t client_id = 0;
  std::size_t n_trees = 0;    // T_k
  std::size_t n_samples = 0;  // N_k
  std::size_t n_features = 0;
  friend bool operator==(const HelloMsg&, const HelloMsg&) = default;
};

/// Carries the sampling strategy so clients need no separate configuration.
struct QuotaMsg {
  std::uint32_t client_id = 0;
  std::size_t quota = 0;
  SamplingStrategy strategy = SamplingStrategy::Uniform;
  friend bool operator==(const QuotaMsg&, const QuotaMsg&) = default;
};

struct TreeUploadMsg {
  std::uint32_t client_id = 0;
  std::vector<SurvivalTree> trees;
  std::vector<double> event_grid;
};
/// Compares trees through their canonical serialization.
bool operator==(const TreeUploadMsg& a, const TreeUploadMsg& b);

struct CompleteMsg {
  std::string digest;
  friend bool operator==(const CompleteMsg&, const CompleteMsg&) = default;
};

struct ErrorMsg {
  std::string code;
  std::string text;
  friend bool operator==(const ErrorMsg&, const ErrorMsg&) = default;
};

using Message = std::variant<HelloMsg, QuotaMsg, TreeUploadMsg, CompleteMsg, ErrorMsg>;

MessageKind kind_of(const Message& m);
std::string_view to_string(MessageKind k);

/// Bad length, unknown kind or payload that does not decode.
struct FrameError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TimeoutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConnectionClosed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// 4-byte big-endian length (kind + payload), kind byte, compact JSON payload.
std::string encode_frame(const Message& m);
/// Decodes one complete frame; throws FrameError.
Message decode_frame(std::string_view bytes);
/// Decodes kind byte + payload (the part after the length prefix).
Message decode_body(std::string_view body);

struct MessageCounts {
  std::array<std::size_t, 5> sent{};
  std::array<std::size_t, 5> received{};

  void count_sent(MessageKind k) { ++sent[index(k)]; }
  void count_received(MessageKind k) { ++received[index(k)]; }
  [[nodiscard]] std::size_t sent_of(MessageKind k) const { return sent[index(k)]; }
  [[nodiscard]] std::size_t received_of(MessageKind k) const { return received[index(k)]; }
  static std::size_t index(MessageKind k);
};

/// Framed, bidirectional byte stream. Not safe for concurrent use by more
/// than one sender or more than one receiver.
class Connection {
 public:
  virtual ~Connection() = default;

  void send(const Message& m);
  /// Throws TimeoutError, ConnectionClosed or FrameError.
  Message receive(Clock::time_point deadline);
  /// Unframed bytes, for fault injection. Not counted.
  void send_raw(std::string_view bytes) { write_all(bytes); }

  /// True once the peer has closed its end and nothing is left to read.
  virtual bool peer_closed() = 0;
  virtual void close() = 0;

  [[nodiscard]] const MessageCounts& counts() const { return counts_; }

 protected:
  virtual void write_all(std::string_view bytes) = 0;
  /// Exactly n bytes or throws TimeoutError / ConnectionClosed.
  virtual std::string read_exact(std::size_t n, Clock::time_point deadline) = 0;

 private:
  MessageCounts counts_;
};

using ConnectionPtr = std::unique_ptr<Connection>;

/// Two connected in-process endpoints.
std::pair<ConnectionPtr, ConnectionPtr> make_pipe();

/// "host:port"; throws std::invalid_argument.
std::pair<std::string, std::uint16_t> parse_address(std::string_view address);

class TcpListener {
 public:
  /// Port 0 binds an ephemeral port; see port().
  explicit TcpListener(std::string_view address);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  [[nodiscard]] std::uint16_t port() const { return port_; }
  /// nullptr on deadline.
  ConnectionPtr accept(Clock::time_point deadline);

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// Retries refused connections until the deadline.
ConnectionPtr connect_tcp(std::string_view address, Clock::time_point deadline);

struct ServerConfig {
  std::size_t expected_clients = 0;  // K
  std::size_t target = 0;            // T
  SamplingStrategy strategy = SamplingStrategy::Uniform;
  std::uint64_t seed = 0;
  std::chrono::milliseconds timeout{120000};
};

struct Exclusion {
  std::optional<std::uint32_t> client_id;  // unknown when no Hello arrived
  std::string reason;
};

struct ClientLog {
  std::uint32_t client_id = 0;
  MessageCounts counts;  // server side of this client's connection
};

struct SessionLog {
  std::vector<ClientLog> clients;  // clients that sent a valid Hello, by id
  [[nodiscard]] std::size_t sent(MessageKind k) const;
  [[nodiscard]] std::size_t received(MessageKind k) const;
};

struct ServerOutcome {
  SurvivalForest model;
  std::string digest;
  FederationPlan plan;
  std::vector<Exclusion> excluded;
  SessionLog log;
};

/// Server side over already-open connections: Hello barrier, quota plan
/// over the live clients, Quota out, TreeUpload in, merge, Complete out.
/// Throws std::runtime_error if no client survives.
ServerOutcome coordinate(std::vector<ConnectionPtr>& conns, const ServerConfig& config);

/// Accepts up to K clients (until the timeout), then coordinate().
ServerOutcome run_server(std::string_view bind_address, const ServerConfig& config,
                         const std::function<void(std::uint16_t)>& on_listening = {});

// Client exit statuses.
inline constexpr int kClientOk = 0;
inline constexpr int kClientServerError = 2;
inline constexpr int kClientTimeout = 3;
inline constexpr int kClientProtocolError = 4;
inline constexpr int kClientTrainingFailed = 5;
inline constexpr int kClientConnectFailed = 6;

struct ClientOutcome {
  int status = kClientOk;
  std::string digest;      // from Complete
  std::string error_code;  // from a server Error, or local failure code
  std::string message;
  std::size_t quota = 0;
};

/// Client side: local training, Hello, Quota, TreeUpload, Complete.
ClientOutcome client_session(Connection& conn, ClientState& client, const RsfParams& params,
                             std::chrono::milliseconds timeout = std::chrono::milliseconds(120000));

ClientOutcome run_client(std::string_view server_address, ClientState& client, const RsfParams& params,
                         std::chrono::milliseconds timeout = std::chrono::milliseconds(120000));

struct SimulationOutcome {
  ServerOutcome server;
  std::vector<ClientOutcome> clients;  // aligned with the input clients
};

/// Full exchange over in-process pipes, one thread per client.
SimulationOutcome simulate_federation(std::vector<ClientState>& clients, const RsfParams& params,
                                      const ServerConfig& config);

}  // namespace fedsurf
