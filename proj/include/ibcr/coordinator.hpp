#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ibcr/hashutil.hpp"
#include "ibcr/state.hpp"

namespace ibcr {

enum class ClientPhase : std::uint8_t {
  Running = 0,
  Quiesced = 1,
  Drained = 2,
  Written = 3,
  RestartWait = 4,
};

inline const char* phase_name(ClientPhase p) {
  switch (p) {
    case ClientPhase::Running: return "RUNNING";
    case ClientPhase::Quiesced: return "QUIESCED";
    case ClientPhase::Drained: return "DRAINED";
    case ClientPhase::Written: return "WRITTEN";
    case ClientPhase::RestartWait: return "RESTART_WAIT";
  }
  return "?";
}

struct KvEntry {
  std::string ns;
  Bytes key;
  Bytes value;
  std::uint64_t publisher = 0;

  bool operator==(const KvEntry&) const = default;
};

struct PhaseEvent {
  std::uint64_t client_id = 0;
  ClientPhase phase = ClientPhase::Running;
};

// Per-node hooks the checkpoint broadcast drives. Returning false models a
// client that never acknowledges the phase.
struct CheckpointHooks {
  std::function<bool()> quiesce;
  std::function<std::size_t()> drain_once;  // one drain round, returns events seen
  std::function<bool()> write_image;
  std::function<void()> resume;
  std::string image_path;
};

// Shared-clock pacing for the drain phase: all clients drain in lockstep
// rounds separated by drain_interval ticks of virtual time.
struct DrainPacing {
  Tick drain_interval_ticks = 100;
  std::size_t max_rounds = 16;
  std::function<void(Tick)> advance;
};

struct CheckpointSummary {
  std::vector<DrainReport> reports;  // indexed like the hooks vector
  std::vector<std::string> image_paths;
  std::size_t drain_rounds = 0;
};

inline const std::set<std::string>& kv_namespaces() {
  static const std::set<std::string> ns = {"qp_pd", "vrkey_pd_rkey", "lid", "qp_real"};
  return ns;
}

// Registration, the two-phase checkpoint barriers, the restart barrier, and
// the namespaced publish/subscribe directory. Transport-agnostic: the
// in-process harness calls it directly, the TCP server translates messages
// onto it.
class CoordinatorCore {
public:
  std::uint64_t register_client(NodeId node_id) {
    if (registration_closed_) fail(Errc::RegistrationClosed, "checkpoint already began");
    for (const auto& [id, c] : clients_)
      if (c.node_id == node_id) fail(Errc::DuplicateNode, "node " + std::to_string(node_id));
    std::uint64_t id = next_client_++;
    clients_[id] = {node_id, ClientPhase::Running};
    return id;
  }

  std::size_t client_count() const { return clients_.size(); }

  NodeId client_node(std::uint64_t client_id) const { return client(client_id).node_id; }

  ClientPhase phase(std::uint64_t client_id) const { return client(client_id).phase; }

  void close_registration() { registration_closed_ = true; }

  void set_phase(std::uint64_t client_id, ClientPhase p) {
    auto& c = clients_.at(client_id);
    c.phase = p;
    phase_log_.push_back({client_id, p});
  }

  const std::vector<PhaseEvent>& phase_log() const { return phase_log_; }

  // ---- publish/subscribe ----

  void open_restart_epoch(std::size_t expected_clients) {
    ++epoch_;
    expected_ = expected_clients;
    entries_.clear();
    barrier_arrivals_.clear();
    barrier_released_ = false;
    barrier_aborted_ = false;
  }

  bool restart_epoch_open() const { return epoch_ != 0 && !barrier_aborted_; }

  void publish(std::uint64_t client_id, const std::string& ns, Bytes key, Bytes value) {
    client(client_id);
    if (!kv_namespaces().count(ns)) fail(Errc::InvalidNamespace, ns);
    if (epoch_ == 0) fail(Errc::InvalidTransition, "no open restart epoch");
    auto it = entries_.find({ns, key});
    if (it != entries_.end()) {
      if (it->second.value != value) fail(Errc::PublishConflict, ns);
      return;  // identical re-publish is a no-op
    }
    entries_[{ns, key}] = {ns, key, std::move(value), client_id};
  }

  std::vector<KvEntry> subscribe(const std::string& ns) const {
    if (!kv_namespaces().count(ns)) fail(Errc::InvalidNamespace, ns);
    if (!barrier_released_) fail(Errc::BarrierNotReached, "subscribe before restart barrier");
    std::vector<KvEntry> out;
    for (const auto& [k, e] : entries_)
      if (k.first == ns) out.push_back(e);
    return out;
  }

  // ---- restart barrier ----

  void barrier_arrive(std::uint64_t client_id) {
    client(client_id);
    barrier_arrivals_.insert(client_id);
    if (expected_ != 0 && barrier_arrivals_.size() >= expected_) barrier_released_ = true;
  }

  bool barrier_released() const { return barrier_released_; }

  void abort_barrier() {
    barrier_aborted_ = true;
    fail(Errc::RestartAborted, "restart barrier incomplete: " +
                                   std::to_string(barrier_arrivals_.size()) + " of " +
                                   std::to_string(expected_));
  }

  std::uint64_t snapshot_hash() const {
    Bytes buf;
    for (const auto& [k, e] : entries_) {
      store_str16(buf, e.ns);
      store_blob32(buf, ByteSpan(e.key.data(), e.key.size()));
      store_blob32(buf, ByteSpan(e.value.data(), e.value.size()));
    }
    return fnv1a64(ByteSpan(buf.data(), buf.size()));
  }

  // ---- in-process checkpoint broadcast ----

  // Drives every registered client through the checkpoint phases with global
  // barriers: nobody drains until everyone is quiesced, and the drain runs in
  // lockstep rounds on the shared virtual clock until a round is silent on
  // every node.
  CheckpointSummary broadcast_checkpoint(const std::vector<std::uint64_t>& client_ids,
                                         const std::vector<CheckpointHooks>& hooks,
                                         const DrainPacing& pacing) {
    if (client_ids.size() != hooks.size())
      fail(Errc::CheckpointAborted, "hooks do not match clients");
    for (std::uint64_t id : client_ids) {
      if (client(id).phase != ClientPhase::Running)
        fail(Errc::CheckpointAborted, "client not RUNNING");
    }
    close_registration();

    CheckpointSummary summary;
    summary.reports.resize(hooks.size());

    for (std::size_t i = 0; i < hooks.size(); ++i) {
      if (!hooks[i].quiesce || !hooks[i].quiesce())
        fail(Errc::CheckpointAborted,
             "client " + std::to_string(client_ids[i]) + " never acknowledged quiesce");
      set_phase(client_ids[i], ClientPhase::Quiesced);
    }

    // lockstep drain rounds: after the initial pass, every node drains again
    // each interval until a waited-for round is silent everywhere
    std::size_t rounds = 0;
    while (true) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < hooks.size(); ++i) {
        std::size_t n = hooks[i].drain_once();
        summary.reports[i].events_drained += n;
        total += n;
      }
      ++rounds;
      if ((total == 0 && rounds > 1) || rounds >= pacing.max_rounds) break;
      if (pacing.advance) pacing.advance(pacing.drain_interval_ticks);
    }
    summary.drain_rounds = rounds;
    for (std::size_t i = 0; i < hooks.size(); ++i) {
      summary.reports[i].rounds = rounds;
      set_phase(client_ids[i], ClientPhase::Drained);
    }

    for (std::size_t i = 0; i < hooks.size(); ++i) {
      if (!hooks[i].write_image())
        fail(Errc::CheckpointAborted,
             "client " + std::to_string(client_ids[i]) + " failed to write its image");
      summary.image_paths.push_back(hooks[i].image_path);
      set_phase(client_ids[i], ClientPhase::Written);
    }

    for (std::size_t i = 0; i < hooks.size(); ++i) {
      hooks[i].resume();
      set_phase(client_ids[i], ClientPhase::Running);
    }
    return summary;
  }

private:
  struct Client {
    NodeId node_id = 0;
    ClientPhase phase = ClientPhase::Running;
  };

  const Client& client(std::uint64_t id) const {
    auto it = clients_.find(id);
    if (it == clients_.end()) fail(Errc::StaleHandle, "unknown client " + std::to_string(id));
    return it->second;
  }

  std::map<std::uint64_t, Client> clients_;
  std::uint64_t next_client_ = 1;
  bool registration_closed_ = false;
  std::vector<PhaseEvent> phase_log_;

  std::uint64_t epoch_ = 0;
  std::size_t expected_ = 0;
  std::map<std::pair<std::string, Bytes>, KvEntry> entries_;
  std::set<std::uint64_t> barrier_arrivals_;
  bool barrier_released_ = false;
  bool barrier_aborted_ = false;
};

// ---- wire protocol ----
//
// Every message is a big-endian u32 length followed by msg_type u8 and a
// type-specific body; strings are u16 length + bytes, blobs u32 length +
// bytes, integers little-endian. Responses start with a status byte (0 = ok,
// otherwise the Errc) followed by a type-specific body.

enum class MsgType : std::uint8_t {
  Register = 1,
  CkptPhaseAck = 2,
  Publish = 3,
  Subscribe = 4,
  Barrier = 5,
  CtrlCkpt = 6,
  CtrlRestart = 7,
};

namespace wirecoord {

inline Bytes with_length(ByteSpan body) {
  Bytes out;
  store_be32(out, static_cast<std::uint32_t>(body.size()));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline bool write_all(int fd, ByteSpan data) {
  std::size_t off = 0;
  while (off < data.size()) {
    ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n <= 0) return false;
    off += std::size_t(n);
  }
  return true;
}

inline bool read_exact(int fd, std::uint8_t* dst, std::size_t n) {
  std::size_t off = 0;
  while (off < n) {
    ssize_t r = ::recv(fd, dst + off, n - off, 0);
    if (r <= 0) return false;
    off += std::size_t(r);
  }
  return true;
}

inline bool read_message(int fd, Bytes& out) {
  std::uint8_t len_buf[4];
  if (!read_exact(fd, len_buf, 4)) return false;
  std::uint32_t len = load_be32(len_buf);
  if (len > (64u << 20)) return false;
  out.resize(len);
  return len == 0 || read_exact(fd, out.data(), len);
}

}  // namespace wirecoord

// Synchronous request/response coordinator service over TCP. One poll loop,
// length-prefixed binary messages; barrier responses are deferred until every
// expected client arrived (or the timeout expires).
class TcpCoordinatorServer {
public:
  struct Options {
    std::string listen_addr = "127.0.0.1";
    std::uint16_t port = 0;  // 0: ephemeral
    std::size_t expected_clients = 0;
    int timeout_secs = 30;
  };

  explicit TcpCoordinatorServer(Options opt) : opt_(opt) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) fail(Errc::WriteFailed, "socket");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(opt.port);
    if (::inet_pton(AF_INET, opt.listen_addr.c_str(), &addr.sin_addr) != 1)
      fail(Errc::AddressUnknown, opt.listen_addr);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      fail(Errc::WriteFailed, "bind " + opt.listen_addr);
    if (::listen(listen_fd_, 16) != 0) fail(Errc::WriteFailed, "listen");
    socklen_t sl = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &sl);
    port_ = ntohs(addr.sin_port);
    if (opt_.expected_clients) core_.open_restart_epoch(opt_.expected_clients);
  }

  ~TcpCoordinatorServer() {
    stop();
    if (listen_fd_ >= 0) ::close(listen_fd_);
    for (auto& [fd, buf] : conns_) ::close(fd);
  }

  std::uint16_t port() const { return port_; }
  CoordinatorCore& core() { return core_; }
  void request_stop() { stopping_ = true; }

  // Serves until request_stop() or (timeout with an unfinished barrier).
  void serve() {
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(opt_.timeout_secs);
    while (!stopping_) {
      std::vector<pollfd> fds;
      fds.push_back({listen_fd_, POLLIN, 0});
      for (auto& [fd, st] : conns_) fds.push_back({fd, POLLIN, 0});
      int rc = ::poll(fds.data(), nfds_t(fds.size()), 50);
      if (rc < 0) break;
      if (fds[0].revents & POLLIN) accept_one();
      std::vector<int> dead;
      for (std::size_t i = 1; i < fds.size(); ++i) {
        if (fds[i].revents & (POLLIN | POLLHUP | POLLERR)) {
          if (!service_fd(fds[i].fd)) dead.push_back(fds[i].fd);
        }
      }
      for (int fd : dead) {
        ::close(fd);
        conns_.erase(fd);
        waiting_barrier_.erase(fd);
      }
      if (!waiting_barrier_.empty() && std::chrono::steady_clock::now() > deadline) {
        // timeout: abort the barrier for everyone still waiting
        for (auto& [fd, client] : waiting_barrier_) {
          Bytes resp;
          resp.push_back(static_cast<std::uint8_t>(Errc::RestartAborted));
          wirecoord::write_all(fd, wirecoord::with_length(ByteSpan(resp.data(), resp.size())));
        }
        waiting_barrier_.clear();
        barrier_timed_out_ = true;
      }
    }
  }

  bool barrier_timed_out() const { return barrier_timed_out_; }

private:
  void accept_one() {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd >= 0) conns_.emplace(fd, Bytes{});
  }

  static void put_status(Bytes& out, Errc e) { out.push_back(static_cast<std::uint8_t>(e)); }

  bool service_fd(int fd) {
    Bytes msg;
    if (!wirecoord::read_message(fd, msg)) return false;
    Bytes resp;
    bool defer = false;
    try {
      resp = handle(fd, ByteSpan(msg.data(), msg.size()), defer);
    } catch (const Error& e) {
      resp.clear();
      put_status(resp, e.code());
    }
    if (defer) return true;
    if (!wirecoord::write_all(fd, wirecoord::with_length(ByteSpan(resp.data(), resp.size()))))
      return false;
    flush_barrier_if_released();
    return true;
  }

  Bytes handle(int fd, ByteSpan msg, bool& defer) {
    ByteReader r(msg, Errc::WireError);
    auto type = static_cast<MsgType>(r.u8());
    Bytes resp;
    switch (type) {
      case MsgType::Register: {
        NodeId node = NodeId(r.u64le());
        std::uint64_t id = core_.register_client(node);
        put_status(resp, Errc::Ok);
        store_le64(resp, id);
        return resp;
      }
      case MsgType::CkptPhaseAck: {
        std::uint64_t client = r.u64le();
        auto phase = static_cast<ClientPhase>(r.u8());
        core_.set_phase(client, phase);
        put_status(resp, Errc::Ok);
        resp.push_back(static_cast<std::uint8_t>(core_.phase(client)));
        return resp;
      }
      case MsgType::Publish: {
        std::uint64_t client = r.u64le();
        std::string ns = r.str16();
        Bytes key = r.blob32();
        Bytes value = r.blob32();
        core_.publish(client, ns, std::move(key), std::move(value));
        put_status(resp, Errc::Ok);
        return resp;
      }
      case MsgType::Subscribe: {
        r.u64le();  // client id (unused: snapshot is global)
        std::string ns = r.str16();
        auto entries = core_.subscribe(ns);
        put_status(resp, Errc::Ok);
        store_le32(resp, static_cast<std::uint32_t>(entries.size()));
        for (const auto& e : entries) {
          store_blob32(resp, ByteSpan(e.key.data(), e.key.size()));
          store_blob32(resp, ByteSpan(e.value.data(), e.value.size()));
          store_le64(resp, e.publisher);
        }
        return resp;
      }
      case MsgType::Barrier: {
        std::uint64_t client = r.u64le();
        core_.barrier_arrive(client);
        if (core_.barrier_released()) {
          put_status(resp, Errc::Ok);
          return resp;  // flushed for the others by flush_barrier_if_released
        }
        waiting_barrier_[fd] = client;
        defer = true;
        return resp;
      }
      case MsgType::CtrlRestart: {
        std::size_t expected = r.u32le();
        core_.open_restart_epoch(expected);
        put_status(resp, Errc::Ok);
        return resp;
      }
      case MsgType::CtrlCkpt: {
        core_.close_registration();
        put_status(resp, Errc::Ok);
        return resp;
      }
    }
    fail(Errc::WireError, "unknown message type");
  }

  void flush_barrier_if_released() {
    if (!core_.barrier_released() || waiting_barrier_.empty()) return;
    Bytes ok;
    ok.push_back(static_cast<std::uint8_t>(Errc::Ok));
    for (auto& [fd, client] : waiting_barrier_)
      wirecoord::write_all(fd, wirecoord::with_length(ByteSpan(ok.data(), ok.size())));
    waiting_barrier_.clear();
  }

  Options opt_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  CoordinatorCore core_;
  std::map<int, Bytes> conns_;
  std::map<int, std::uint64_t> waiting_barrier_;
  std::atomic<bool> stopping_{false};
  bool barrier_timed_out_ = false;

  void stop() { stopping_ = true; }
};

// Blocking client for the wire protocol above.
class TcpCoordinatorClient {
public:
  TcpCoordinatorClient(const std::string& addr, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail(Errc::WriteFailed, "socket");
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    if (::inet_pton(AF_INET, addr.c_str(), &sa.sin_addr) != 1) fail(Errc::AddressUnknown, addr);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
      fail(Errc::WriteFailed, "connect " + addr + ":" + std::to_string(port));
  }

  ~TcpCoordinatorClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  TcpCoordinatorClient(const TcpCoordinatorClient&) = delete;
  TcpCoordinatorClient& operator=(const TcpCoordinatorClient&) = delete;

  std::uint64_t register_node(NodeId node) {
    Bytes req;
    req.push_back(static_cast<std::uint8_t>(MsgType::Register));
    store_le64(req, node);
    ByteReader r = roundtrip(req);
    check_status(r);
    client_id_ = r.u64le();
    return client_id_;
  }

  std::uint64_t client_id() const { return client_id_; }

  void publish(const std::string& ns, ByteSpan key, ByteSpan value) {
    Bytes req;
    req.push_back(static_cast<std::uint8_t>(MsgType::Publish));
    store_le64(req, client_id_);
    store_str16(req, ns);
    store_blob32(req, key);
    store_blob32(req, value);
    ByteReader r = roundtrip(req);
    check_status(r);
  }

  std::vector<KvEntry> subscribe(const std::string& ns) {
    Bytes req;
    req.push_back(static_cast<std::uint8_t>(MsgType::Subscribe));
    store_le64(req, client_id_);
    store_str16(req, ns);
    ByteReader r = roundtrip(req);
    check_status(r);
    std::uint32_t n = r.u32le();
    std::vector<KvEntry> out;
    out.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      KvEntry e;
      e.ns = ns;
      e.key = r.blob32();
      e.value = r.blob32();
      e.publisher = r.u64le();
      out.push_back(std::move(e));
    }
    return out;
  }

  // Blocks until the coordinator releases the barrier (or aborts it).
  void barrier() {
    barrier_send();
    barrier_wait();
  }

  // Split form for a caller that multiplexes several clients from one
  // thread: queue all arrivals first, then collect the releases.
  void barrier_send() {
    Bytes req;
    req.push_back(static_cast<std::uint8_t>(MsgType::Barrier));
    store_le64(req, client_id_);
    if (!wirecoord::write_all(fd_, wirecoord::with_length(ByteSpan(req.data(), req.size()))))
      fail(Errc::WriteFailed, "coordinator request");
  }

  void barrier_wait() {
    if (!wirecoord::read_message(fd_, resp_)) fail(Errc::WireError, "coordinator response");
    ByteReader r(ByteSpan(resp_.data(), resp_.size()), Errc::WireError);
    check_status(r);
  }

  ClientPhase ack_phase(ClientPhase p) {
    Bytes req;
    req.push_back(static_cast<std::uint8_t>(MsgType::CkptPhaseAck));
    store_le64(req, client_id_);
    req.push_back(static_cast<std::uint8_t>(p));
    ByteReader r = roundtrip(req);
    check_status(r);
    return static_cast<ClientPhase>(r.u8());
  }

  void ctrl_restart(std::uint32_t expected) {
    Bytes req;
    req.push_back(static_cast<std::uint8_t>(MsgType::CtrlRestart));
    store_le32(req, expected);
    ByteReader r = roundtrip(req);
    check_status(r);
  }

private:
  ByteReader roundtrip(const Bytes& req) {
    if (!wirecoord::write_all(fd_, wirecoord::with_length(ByteSpan(req.data(), req.size()))))
      fail(Errc::WriteFailed, "coordinator request");
    if (!wirecoord::read_message(fd_, resp_)) fail(Errc::WireError, "coordinator response");
    return ByteReader(ByteSpan(resp_.data(), resp_.size()), Errc::WireError);
  }

  static void check_status(ByteReader& r) {
    auto st = static_cast<Errc>(r.u8());
    if (st != Errc::Ok) fail(st, "coordinator refused request");
  }

  int fd_ = -1;
  std::uint64_t client_id_ = 0;
  Bytes resp_;
};

}  // namespace ibcr
