#include "fedsurf/transport.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "fedsurf/serialize.hpp"

namespace fedsurf {
namespace {

using nlohmann::json;

// ---- payload codec ----

std::uint64_t get_unsigned(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_number_unsigned()) throw FrameError(std::string("field '") + key + "' missing or not unsigned");
  return it->get<std::uint64_t>();
}

std::uint32_t get_client_id(const json& j) {
  const auto id = get_unsigned(j, "client_id");
  if (id > std::numeric_limits<std::uint32_t>::max()) throw FrameError("client_id out of range");
  return static_cast<std::uint32_t>(id);
}

std::string get_string(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_string()) throw FrameError(std::string("field '") + key + "' missing or not a string");
  return it->get<std::string>();
}

const json& get_array(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_array()) throw FrameError(std::string("field '") + key + "' missing or not an array");
  return *it;
}

json payload_of(const Message& m) {
  json j = json::object();
  std::visit(
      [&j](const auto& msg) {
        using T = std::decay_t<decltype(msg)>;
        if constexpr (std::is_same_v<T, HelloMsg>) {
          j["client_id"] = msg.client_id;
          j["n_trees"] = msg.n_trees;
          j["n_samples"] = msg.n_samples;
          j["d"] = msg.n_features;
        } else if constexpr (std::is_same_v<T, QuotaMsg>) {
          j["client_id"] = msg.client_id;
          j["quota"] = msg.quota;
          j["strategy"] = std::string(to_string(msg.strategy));
        } else if constexpr (std::is_same_v<T, TreeUploadMsg>) {
          j["client_id"] = msg.client_id;
          json trees = json::array();
          for (const auto& t : msg.trees) trees.push_back(tree_to_json(t));
          j["trees"] = std::move(trees);
          j["grid"] = grid_to_json(msg.event_grid);
        } else if constexpr (std::is_same_v<T, CompleteMsg>) {
          j["digest"] = msg.digest;
        } else {
          j["code"] = msg.code;
          j["text"] = msg.text;
        }
      },
      m);
  return j;
}

Message message_from(MessageKind kind, const json& j) {
  if (!j.is_object()) throw FrameError("payload is not an object");
  switch (kind) {
    case MessageKind::Hello:
      return HelloMsg{get_client_id(j), get_unsigned(j, "n_trees"), get_unsigned(j, "n_samples"), get_unsigned(j, "d")};
    case MessageKind::Quota: {
      SamplingStrategy s;
      try {
        s = parse_strategy(get_string(j, "strategy"));
      } catch (const std::invalid_argument& e) {
        throw FrameError(e.what());
      }
      return QuotaMsg{get_client_id(j), get_unsigned(j, "quota"), s};
    }
    case MessageKind::TreeUpload: {
      TreeUploadMsg msg;
      msg.client_id = get_client_id(j);
      try {
        for (const auto& t : get_array(j, "trees")) msg.trees.push_back(tree_from_json(t));
        msg.event_grid = grid_from_json(get_array(j, "grid"));
      } catch (const std::invalid_argument& e) {
        throw FrameError(std::string("bad tree upload: ") + e.what());
      }
      return msg;
    }
    case MessageKind::Complete:
      return CompleteMsg{get_string(j, "digest")};
    case MessageKind::Error:
      return ErrorMsg{get_string(j, "code"), get_string(j, "text")};
  }
  throw FrameError("unknown message kind");
}

bool known_kind(std::uint8_t k) {
  return k == 0x01 || k == 0x02 || k == 0x03 || k == 0x04 || k == 0x7F;
}

std::size_t body_length(std::string_view header) {
  const auto* p = reinterpret_cast<const unsigned char*>(header.data());
  const std::size_t len = (std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) | (std::size_t{p[2]} << 8) | p[3];
  if (len < 1) throw FrameError("empty frame");
  if (len > kMaxFrameBytes) throw FrameError("frame exceeds 64 MiB");
  return len;
}

// ---- in-process pipe ----

struct PipeShared {
  std::mutex mu;
  std::condition_variable cv;
  std::string inbox[2];  // bytes waiting for endpoint i
  bool closed[2] = {false, false};
};

class PipeConnection final : public Connection {
 public:
  PipeConnection(std::shared_ptr<PipeShared> shared, int side) : shared_(std::move(shared)), side_(side) {}
  ~PipeConnection() override { close(); }

  bool peer_closed() override {
    std::lock_guard lock(shared_->mu);
    return shared_->closed[1 - side_] && shared_->inbox[side_].empty();
  }

  void close() override {
    std::lock_guard lock(shared_->mu);
    shared_->closed[side_] = true;
    shared_->cv.notify_all();
  }

 protected:
  void write_all(std::string_view bytes) override {
    std::lock_guard lock(shared_->mu);
    if (shared_->closed[side_] || shared_->closed[1 - side_]) throw ConnectionClosed("pipe closed");
    shared_->inbox[1 - side_].append(bytes);
    shared_->cv.notify_all();
  }

  std::string read_exact(std::size_t n, Clock::time_point deadline) override {
    std::unique_lock lock(shared_->mu);
    auto& box = shared_->inbox[side_];
    const bool ready = shared_->cv.wait_until(lock, deadline, [&] {
      return box.size() >= n || shared_->closed[0] || shared_->closed[1];
    });
    if (box.size() >= n) {
      std::string out = box.substr(0, n);
      box.erase(0, n);
      return out;
    }
    if (ready) throw ConnectionClosed("pipe closed");
    throw TimeoutError("receive timed out");
  }

 private:
  std::shared_ptr<PipeShared> shared_;
  int side_;
};

// ---- TCP ----

int remaining_ms(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
  if (left <= 0) return 0;
  return static_cast<int>(std::min<long long>(left, std::numeric_limits<int>::max()));
}

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

class TcpConnection final : public Connection {
 public:
  explicit TcpConnection(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpConnection() override { close(); }

  bool peer_closed() override {
    if (fd_ < 0) return true;
    pollfd p{fd_, POLLIN, 0};
    if (::poll(&p, 1, 0) <= 0) return false;
    char c;
    const auto r = ::recv(fd_, &c, 1, MSG_PEEK | MSG_DONTWAIT);
    if (r == 0) return true;
    return r < 0 && errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR;
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 protected:
  void write_all(std::string_view bytes) override {
    if (fd_ < 0) throw ConnectionClosed("socket closed");
    std::size_t off = 0;
    while (off < bytes.size()) {
      const auto r = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (r < 0) {
        if (errno == EINTR) continue;
        if (errno == EPIPE || errno == ECONNRESET) throw ConnectionClosed("peer closed the connection");
        throw std::runtime_error(errno_text("send"));
      }
      off += static_cast<std::size_t>(r);
    }
  }

  std::string read_exact(std::size_t n, Clock::time_point deadline) override {
    if (fd_ < 0) throw ConnectionClosed("socket closed");
    std::string out(n, '\0');
    std::size_t off = 0;
    while (off < n) {
      pollfd p{fd_, POLLIN, 0};
      const int ready = ::poll(&p, 1, remaining_ms(deadline));
      if (ready < 0) {
        if (errno == EINTR) continue;
        throw std::runtime_error(errno_text("poll"));
      }
      if (ready == 0) throw TimeoutError("receive timed out");
      const auto r = ::recv(fd_, out.data() + off, n - off, 0);
      if (r == 0) throw ConnectionClosed("peer closed the connection");
      if (r < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        if (errno == ECONNRESET) throw ConnectionClosed("connection reset");
        throw std::runtime_error(errno_text("recv"));
      }
      off += static_cast<std::size_t>(r);
    }
    return out;
  }

 private:
  int fd_;
};

struct AddrInfo {
  addrinfo* head = nullptr;
  AddrInfo(const std::string& host, std::uint16_t port, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    const std::string service = std::to_string(port);
    const int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), service.c_str(), &hints, &head);
    if (rc != 0) throw std::runtime_error("cannot resolve '" + host + "': " + ::gai_strerror(rc));
  }
  ~AddrInfo() {
    if (head) ::freeaddrinfo(head);
  }
  AddrInfo(const AddrInfo&) = delete;
  AddrInfo& operator=(const AddrInfo&) = delete;
};

void send_quietly(Connection& c, const Message& m) {
  try {
    c.send(m);
  } catch (const std::exception&) {
  }
}

void reject(Connection& c, std::string code, std::string text) {
  send_quietly(c, ErrorMsg{std::move(code), std::move(text)});
  c.close();
}

template <typename Fn>
void for_each_parallel(std::size_t n, Fn fn) {
  std::vector<std::thread> threads;
  threads.reserve(n);
  for (std::size_t i = 0; i < n; ++i) threads.emplace_back(fn, i);
  for (auto& t : threads) t.join();
}

bool valid_grid(const std::vector<double>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i]) || (i > 0 && !(g[i - 1] < g[i]))) return false;
  }
  return true;
}

}  // namespace

bool operator==(const TreeUploadMsg& a, const TreeUploadMsg& b) {
  if (a.client_id != b.client_id || a.event_grid != b.event_grid || a.trees.size() != b.trees.size()) return false;
  for (std::size_t i = 0; i < a.trees.size(); ++i) {
    if (serialize_tree(a.trees[i]) != serialize_tree(b.trees[i])) return false;
  }
  return true;
}

MessageKind kind_of(const Message& m) {
  static constexpr std::array<MessageKind, 5> kinds = {MessageKind::Hello, MessageKind::Quota, MessageKind::TreeUpload,
                                                       MessageKind::Complete, MessageKind::Error};
  return kinds[m.index()];
}

std::string_view to_string(MessageKind k) {
  switch (k) {
    case MessageKind::Hello: return "Hello";
    case MessageKind::Quota: return "Quota";
    case MessageKind::TreeUpload: return "TreeUpload";
    case MessageKind::Complete: return "Complete";
    case MessageKind::Error: return "Error";
  }
  return "?";
}

std::size_t MessageCounts::index(MessageKind k) {
  switch (k) {
    case MessageKind::Hello: return 0;
    case MessageKind::Quota: return 1;
    case MessageKind::TreeUpload: return 2;
    case MessageKind::Complete: return 3;
    case MessageKind::Error: return 4;
  }
  throw std::invalid_argument("unknown message kind");
}

std::string encode_frame(const Message& m) {
  const std::string payload = payload_of(m).dump(-1, ' ', false, json::error_handler_t::replace);
  const std::size_t len = payload.size() + 1;
  if (len > kMaxFrameBytes) throw FrameError("frame exceeds 64 MiB");
  std::string out;
  out.reserve(len + 4);
  out.push_back(static_cast<char>((len >> 24) & 0xFF));
  out.push_back(static_cast<char>((len >> 16) & 0xFF));
  out.push_back(static_cast<char>((len >> 8) & 0xFF));
  out.push_back(static_cast<char>(len & 0xFF));
  out.push_back(static_cast<char>(kind_of(m)));
  out += payload;
  return out;
}

Message decode_body(std::string_view body) {
  if (body.empty()) throw FrameError("empty frame");
  const auto k = static_cast<std::uint8_t>(body[0]);
  if (!known_kind(k)) throw FrameError("unknown message kind " + std::to_string(k));
  json j;
  try {
    j = json::parse(body.substr(1));
  } catch (const json::exception& e) {
    throw FrameError(std::string("payload is not valid JSON: ") + e.what());
  }
  try {
    return message_from(static_cast<MessageKind>(k), j);
  } catch (const json::exception& e) {
    throw FrameError(e.what());
  }
}

Message decode_frame(std::string_view bytes) {
  if (bytes.size() < 4) throw FrameError("truncated frame header");
  const std::size_t len = body_length(bytes.substr(0, 4));
  if (bytes.size() != len + 4) throw FrameError("frame length does not match its header");
  return decode_body(bytes.substr(4));
}

void Connection::send(const Message& m) {
  write_all(encode_frame(m));
  counts_.count_sent(kind_of(m));
}

Message Connection::receive(Clock::time_point deadline) {
  const std::string header = read_exact(4, deadline);
  const std::size_t len = body_length(header);
  Message m = decode_body(read_exact(len, deadline));
  counts_.count_received(kind_of(m));
  return m;
}

std::pair<ConnectionPtr, ConnectionPtr> make_pipe() {
  auto shared = std::make_shared<PipeShared>();
  return {std::make_unique<PipeConnection>(shared, 0), std::make_unique<PipeConnection>(shared, 1)};
}

std::pair<std::string, std::uint16_t> parse_address(std::string_view address) {
  const auto colon = address.rfind(':');
  if (colon == std::string_view::npos) throw std::invalid_argument("address must be HOST:PORT");
  std::string host(address.substr(0, colon));
  if (host.size() >= 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  const auto port_text = address.substr(colon + 1);
  unsigned long port = 0;
  try {
    std::size_t used = 0;
    port = std::stoul(std::string(port_text), &used);
    if (used != port_text.size()) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid port in '" + std::string(address) + "'");
  }
  if (port > 65535) throw std::invalid_argument("port out of range in '" + std::string(address) + "'");
  return {host, static_cast<std::uint16_t>(port)};
}

TcpListener::TcpListener(std::string_view address) {
  const auto [host, port] = parse_address(address);
  AddrInfo ai(host, port, true);
  std::string last_error = "no usable address";
  for (auto* a = ai.head; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, a->ai_addr, a->ai_addrlen) == 0 && ::listen(fd, 128) == 0) {
      fd_ = fd;
      break;
    }
    last_error = errno_text("bind");
    ::close(fd);
  }
  if (fd_ < 0) throw std::runtime_error("cannot listen on " + std::string(address) + ": " + last_error);
  sockaddr_storage ss{};
  socklen_t len = sizeof ss;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&ss), &len);
  if (ss.ss_family == AF_INET) port_ = ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
  else port_ = ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

ConnectionPtr TcpListener::accept(Clock::time_point deadline) {
  while (true) {
    pollfd p{fd_, POLLIN, 0};
    const int ready = ::poll(&p, 1, remaining_ms(deadline));
    if (ready < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(errno_text("poll"));
    }
    if (ready == 0) return nullptr;
    const int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED || errno == EAGAIN) continue;
      throw std::runtime_error(errno_text("accept"));
    }
    return std::make_unique<TcpConnection>(fd);
  }
}

ConnectionPtr connect_tcp(std::string_view address, Clock::time_point deadline) {
  const auto [host, port] = parse_address(address);
  std::string last_error;
  do {
    AddrInfo ai(host, port, false);
    for (auto* a = ai.head; a; a = a->ai_next) {
      const int fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) return std::make_unique<TcpConnection>(fd);
      last_error = errno_text("connect");
      ::close(fd);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  } while (Clock::now() < deadline);
  throw std::runtime_error("cannot connect to " + std::string(address) + ": " + last_error);
}

std::size_t SessionLog::sent(MessageKind k) const {
  std::size_t n = 0;
  for (const auto& c : clients) n += c.counts.sent_of(k);
  return n;
}

std::size_t SessionLog::received(MessageKind k) const {
  std::size_t n = 0;
  for (const auto& c : clients) n += c.counts.received_of(k);
  return n;
}

ServerOutcome coordinate(std::vector<ConnectionPtr>& conns, const ServerConfig& config) {
  const std::size_t n = conns.size();
  std::vector<Exclusion> excluded;
  auto exclude = [&excluded](std::optional<std::uint32_t> id, std::string reason) {
    if (id) spdlog::warn("client {} excluded: {}", *id, reason);
    else spdlog::warn("connection excluded: {}", reason);
    excluded.push_back({id, std::move(reason)});
  };

  // Hello barrier.
  std::vector<std::optional<HelloMsg>> hellos(n);
  std::vector<std::string> failures(n);
  const auto hello_deadline = Clock::now() + config.timeout;
  for_each_parallel(n, [&](std::size_t i) {
    auto& c = *conns[i];
    try {
      Message m = c.receive(hello_deadline);
      if (auto* h = std::get_if<HelloMsg>(&m)) {
        hellos[i] = *h;
      } else if (auto* e = std::get_if<ErrorMsg>(&m)) {
        failures[i] = "client reported " + e->code + ": " + e->text;
        c.close();
      } else {
        failures[i] = "expected Hello, got " + std::string(to_string(kind_of(m)));
        reject(c, "unexpected_message", failures[i]);
      }
    } catch (const FrameError& e) {
      failures[i] = std::string("malformed frame: ") + e.what();
      reject(c, "malformed_frame", e.what());
    } catch (const TimeoutError&) {
      failures[i] = "timed out before Hello";
      c.close();
    } catch (const std::exception& e) {
      failures[i] = e.what();
      c.close();
    }
  });

  // Validate in ascending id order so the outcome does not depend on arrival.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    if (hellos[i]) order.push_back(i);
    else exclude(std::nullopt, failures[i]);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return hellos[a]->client_id < hellos[b]->client_id; });
  std::optional<std::size_t> dim;
  std::set<std::uint32_t> seen;
  std::map<std::uint32_t, std::size_t> live;  // client id -> connection
  for (auto i : order) {
    const auto& h = *hellos[i];
    if (!seen.insert(h.client_id).second) {
      reject(*conns[i], "duplicate_client_id", "client id " + std::to_string(h.client_id) + " already joined");
      exclude(h.client_id, "duplicate client id");
      continue;
    }
    if (h.n_trees == 0) {
      reject(*conns[i], "no_trees", "client announced zero trees");
      exclude(h.client_id, "zero local trees");
      continue;
    }
    if (!dim) dim = h.n_features;
    if (h.n_features != *dim) {
      reject(*conns[i], "dimension_mismatch",
             "expected " + std::to_string(*dim) + " features, got " + std::to_string(h.n_features));
      exclude(h.client_id, "feature dimension mismatch");
      continue;
    }
    live.emplace(h.client_id, i);
  }

  // Clients gone since their Hello do not get a quota.
  for (auto it = live.begin(); it != live.end();) {
    if (conns[it->second]->peer_closed()) {
      exclude(it->first, "disconnected before quota");
      it = live.erase(it);
    } else {
      ++it;
    }
  }

  SessionLog log;
  auto finish_log = [&] {
    for (auto i : order) {
      if (std::none_of(log.clients.begin(), log.clients.end(),
                       [&](const ClientLog& c) { return c.client_id == hellos[i]->client_id; }))
        log.clients.push_back({hellos[i]->client_id, conns[i]->counts()});
    }
  };

  if (live.empty()) throw std::runtime_error("federation failed: no client completed the Hello phase");

  std::vector<ClientSummary> summaries;
  for (const auto& [id, i] : live) summaries.push_back({id, hellos[i]->n_samples, hellos[i]->n_trees});
  FederationPlan plan = plan_federation(summaries, config.target, config.seed);

  for (auto it = live.begin(); it != live.end();) {
    try {
      conns[it->second]->send(QuotaMsg{it->first, *plan.quota_for(it->first), config.strategy});
      ++it;
    } catch (const std::exception& e) {
      conns[it->second]->close();
      exclude(it->first, std::string("quota not delivered: ") + e.what());
      it = live.erase(it);
    }
  }

  // Uploads. A client lost here is dropped without replanning.
  std::vector<std::pair<std::uint32_t, std::size_t>> members(live.begin(), live.end());
  std::vector<std::optional<TreeBatch>> batches(members.size());
  std::vector<std::string> upload_failures(members.size());
  const auto upload_deadline = Clock::now() + config.timeout;
  for_each_parallel(members.size(), [&](std::size_t m) {
    const auto [id, i] = members[m];
    auto& c = *conns[i];
    const std::size_t quota = *plan.quota_for(id);
    try {
      Message msg = c.receive(upload_deadline);
      auto* up = std::get_if<TreeUploadMsg>(&msg);
      if (!up) {
        if (auto* e = std::get_if<ErrorMsg>(&msg)) {
          upload_failures[m] = "client reported " + e->code + ": " + e->text;
          c.close();
        } else {
          upload_failures[m] = "expected TreeUpload, got " + std::string(to_string(kind_of(msg)));
          reject(c, "unexpected_message", upload_failures[m]);
        }
        return;
      }
      std::string problem;
      if (up->client_id != id) problem = "client id changed";
      else if (up->trees.size() != quota) problem = "uploaded " + std::to_string(up->trees.size()) + " trees, quota " + std::to_string(quota);
      else if (!valid_grid(up->event_grid)) problem = "event grid not strictly increasing";
      else if (std::any_of(up->trees.begin(), up->trees.end(),
                           [&](const SurvivalTree& t) { return t.n_features() != *dim; }))
        problem = "tree feature dimension mismatch";
      if (!problem.empty()) {
        upload_failures[m] = problem;
        reject(c, "invalid_upload", problem);
        return;
      }
      batches[m] = TreeBatch{id, std::move(up->trees), std::move(up->event_grid)};
    } catch (const FrameError& e) {
      upload_failures[m] = std::string("malformed frame: ") + e.what();
      reject(c, "malformed_frame", e.what());
    } catch (const TimeoutError&) {
      upload_failures[m] = "timed out before TreeUpload";
      c.close();
    } catch (const std::exception& e) {
      upload_failures[m] = e.what();
      c.close();
    }
  });

  std::vector<TreeBatch> merged_input;
  std::vector<std::size_t> finishers;
  for (std::size_t m = 0; m < members.size(); ++m) {
    if (batches[m]) {
      merged_input.push_back(std::move(*batches[m]));
      finishers.push_back(members[m].second);
    } else {
      exclude(members[m].first, upload_failures[m]);
    }
  }
  const bool any_tree = std::any_of(merged_input.begin(), merged_input.end(),
                                    [](const TreeBatch& b) { return !b.trees.empty(); });
  if (!any_tree) {
    for (auto i : finishers) reject(*conns[i], "federation_failed", "no trees were collected");
    throw std::runtime_error("federation failed: no trees were collected");
  }

  SurvivalForest model = merge_ensemble(std::move(merged_input));
  std::string digest = forest_digest(model);
  for (auto i : finishers) {
    send_quietly(*conns[i], CompleteMsg{digest});
    conns[i]->close();
  }
  finish_log();
  std::sort(log.clients.begin(), log.clients.end(),
            [](const ClientLog& a, const ClientLog& b) { return a.client_id < b.client_id; });
  return {std::move(model), std::move(digest), std::move(plan), std::move(excluded), std::move(log)};
}

ServerOutcome run_server(std::string_view bind_address, const ServerConfig& config,
                         const std::function<void(std::uint16_t)>& on_listening) {
  if (config.expected_clients < 1) throw std::invalid_argument("run_server: expected clients must be >= 1");
  TcpListener listener(bind_address);
  spdlog::info("listening on port {}", listener.port());
  if (on_listening) on_listening(listener.port());
  const auto deadline = Clock::now() + config.timeout;
  std::vector<ConnectionPtr> conns;
  while (conns.size() < config.expected_clients) {
    auto c = listener.accept(deadline);
    if (!c) break;
    conns.push_back(std::move(c));
  }
  if (conns.size() < config.expected_clients) {
    spdlog::warn("only {} of {} clients connected before the timeout", conns.size(), config.expected_clients);
  }
  if (conns.empty()) throw std::runtime_error("no client connected");
  return coordinate(conns, config);
}

ClientOutcome client_session(Connection& conn, ClientState& client, const RsfParams& params,
                             std::chrono::milliseconds timeout) {
  ClientOutcome out;
  auto fail = [&](int status, std::string code, std::string message) {
    out.status = status;
    out.error_code = std::move(code);
    out.message = std::move(message);
    return out;
  };

  try {
    local_train(client, params);
  } catch (const std::exception& e) {
    send_quietly(conn, ErrorMsg{"training_failed", e.what()});
    conn.close();
    return fail(kClientTrainingFailed, "training_failed", e.what());
  }

  try {
    conn.send(HelloMsg{client.client_id, client.n_trees(), client.n_samples(), client.forest->n_features()});
    Message m = conn.receive(Clock::now() + timeout);
    if (auto* e = std::get_if<ErrorMsg>(&m)) return fail(kClientServerError, e->code, e->text);
    auto* q = std::get_if<QuotaMsg>(&m);
    if (!q || q->client_id != client.client_id) {
      reject(conn, "unexpected_message", "expected a Quota for this client");
      return fail(kClientProtocolError, "unexpected_message", "expected a Quota for this client");
    }
    if (q->quota > client.n_trees()) {
      reject(conn, "invalid_quota", "quota exceeds local trees");
      return fail(kClientProtocolError, "invalid_quota", "quota exceeds local trees");
    }
    out.quota = q->quota;
    TreeBatch batch = respond_to_quota(client, q->quota, q->strategy);
    conn.send(TreeUploadMsg{batch.client_id, std::move(batch.trees), std::move(batch.event_grid)});
    m = conn.receive(Clock::now() + timeout);
    if (auto* e = std::get_if<ErrorMsg>(&m)) return fail(kClientServerError, e->code, e->text);
    auto* done = std::get_if<CompleteMsg>(&m);
    if (!done) {
      reject(conn, "unexpected_message", "expected Complete");
      return fail(kClientProtocolError, "unexpected_message", "expected Complete");
    }
    out.digest = done->digest;
    conn.close();
    return out;
  } catch (const TimeoutError& e) {
    conn.close();
    return fail(kClientTimeout, "timeout", e.what());
  } catch (const FrameError& e) {
    reject(conn, "malformed_frame", e.what());
    return fail(kClientProtocolError, "malformed_frame", e.what());
  } catch (const ConnectionClosed& e) {
    conn.close();
    return fail(kClientProtocolError, "connection_closed", e.what());
  }
}

ClientOutcome run_client(std::string_view server_address, ClientState& client, const RsfParams& params,
                         std::chrono::milliseconds timeout) {
  ConnectionPtr conn;
  try {
    conn = connect_tcp(server_address, Clock::now() + timeout);
  } catch (const std::exception& e) {
    ClientOutcome out;
    out.status = kClientConnectFailed;
    out.error_code = "connect_failed";
    out.message = e.what();
    return out;
  }
  return client_session(*conn, client, params, timeout);
}

SimulationOutcome simulate_federation(std::vector<ClientState>& clients, const RsfParams& params,
                                      const ServerConfig& config) {
  std::vector<ConnectionPtr> server_ends;
  std::vector<ConnectionPtr> client_ends;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    auto [s, c] = make_pipe();
    server_ends.push_back(std::move(s));
    client_ends.push_back(std::move(c));
  }
  std::vector<ClientOutcome> outcomes(clients.size());
  std::vector<std::thread> threads;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    threads.emplace_back([&, k] {
      try {
        outcomes[k] = client_session(*client_ends[k], clients[k], params, config.timeout);
      } catch (const std::exception& e) {
        client_ends[k]->close();
        outcomes[k].status = kClientProtocolError;
        outcomes[k].error_code = "internal";
        outcomes[k].message = e.what();
      }
    });
  }
  std::optional<ServerOutcome> server;
  std::exception_ptr error;
  try {
    server = coordinate(server_ends, config);
  } catch (...) {
    error = std::current_exception();
  }
  for (auto& c : server_ends) c->close();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  return {std::move(*server), std::move(outcomes)};
}

}  // namespace fedsurf
