#pragma once

#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <vector>

#include "ibcr/hashutil.hpp"
#include "ibcr/wire.hpp"

namespace ibcr {

enum class FabricMode { InProcess, Stream };

struct NodeAddr {
  NodeId node_id = 0;
  std::uint32_t port_index = 0;

  auto operator<=>(const NodeAddr&) const = default;
};

struct FabricConfig {
  FabricMode mode = FabricMode::InProcess;
  Tick delivery_delay_ticks = 0;
  // Gap between receiver-side and sender-side completion posting: acks travel
  // this many ticks, so the sender learns of a delivery that much later.
  Tick completion_skew_ticks = 0;
  std::uint64_t rng_seed = 42;
  std::uint32_t ports_per_node = 1;
};

struct DeliveryRecord {
  Tick tick = 0;
  ConnId conn_id = 0;
  std::uint8_t direction = 0;
  std::uint64_t seq = 0;
  FrameKind kind = FrameKind::SendData;
  std::uint64_t payload_hash = 0;

  bool operator==(const DeliveryRecord&) const = default;
};

struct InFlightInfo {
  ConnId conn_id = 0;
  std::uint8_t direction = 0;
  std::uint64_t seq = 0;
  FrameKind kind = FrameKind::SendData;
  Tick deliver_tick = 0;
  NodeId src = 0;
  NodeId dst = 0;
};

// Reliable-connection transport between simulated nodes. Delivery is driven
// exclusively by step(): a frame sent at tick T with delay d becomes visible
// during the first step that advances the clock to max(T+d, T+1). In Stream
// mode every frame additionally round-trips through a real socketpair using
// the length-prefixed wire encoding; the delivery schedule is identical.
class Fabric {
public:
  using DeliverFn = std::function<void(NodeId dst, const Frame&)>;

  explicit Fabric(FabricConfig cfg) : cfg_(cfg) {}

  ~Fabric() {
    for (auto& [id, c] : conns_) close_sockets(c);
  }

  Fabric(const Fabric&) = delete;
  Fabric& operator=(const Fabric&) = delete;
  Fabric(Fabric&&) = default;
  Fabric& operator=(Fabric&&) = delete;

  const FabricConfig& config() const { return cfg_; }
  Tick now() const { return now_; }

  void set_deliver_handler(DeliverFn fn) { deliver_ = std::move(fn); }

  void add_node(NodeId node) { nodes_.insert(node); }

  bool has_node(NodeId node) const { return nodes_.count(node) != 0; }

  void check_addr(const NodeAddr& a) const {
    if (!has_node(a.node_id)) fail(Errc::AddressUnknown, "node " + std::to_string(a.node_id));
    if (a.port_index >= cfg_.ports_per_node) fail(Errc::AddressUnknown, "port out of range");
  }

  ConnId connect(const NodeAddr& a, const NodeAddr& b) {
    check_addr(a);
    check_addr(b);
    if (a.node_id == b.node_id) fail(Errc::SelfConnectRejected, "loopback connection");
    ConnId id = next_conn_id_++;
    Conn c;
    c.ends[0] = a.node_id;
    c.ends[1] = b.node_id;
    if (cfg_.mode == FabricMode::Stream) open_sockets(c);
    conns_.emplace(id, std::move(c));
    return id;
  }

  // New application-originated traffic. Returns the assigned per-connection
  // sequence number, or nullopt (frame not enqueued) when the sending node is
  // quiesced. `internal` marks fabric/engine control frames (acks, read
  // responses) that are exempt from quiesce suppression.
  std::optional<std::uint64_t> send(ConnId conn_id, NodeId from, Frame frame,
                                    std::optional<Tick> delay = std::nullopt,
                                    bool internal = false) {
    Conn& c = conn(conn_id);
    if (!c.open) fail(Errc::StaleHandle, "connection closed");
    std::uint8_t dir = direction_of(c, from);
    if (!internal && quiesced_.count(from)) return std::nullopt;

    frame.conn_id = conn_id;
    frame.seq = c.next_seq[dir]++;
    Tick d = delay.value_or(cfg_.delivery_delay_ticks);

    if (cfg_.mode == FabricMode::Stream) {
      Bytes rec = frame_record_with_length(frame);
      c.out_buf[dir].insert(c.out_buf[dir].end(), rec.begin(), rec.end());
      pump_conn(c, dir);
    }

    InFlight inf;
    // FIFO per direction: a frame never overtakes its predecessor on the
    // same stream, whatever delay it was given.
    inf.deliver_tick = std::max(now_ + d, c.last_sched[dir]);
    c.last_sched[dir] = inf.deliver_tick;
    inf.order = next_order_++;
    inf.conn_id = conn_id;
    inf.dir = dir;
    std::uint64_t seq = frame.seq;
    inf.frame = std::move(frame);
    heap_.push(std::move(inf));
    return seq;
  }

  void step(Tick ticks) {
    for (Tick i = 0; i < ticks; ++i) {
      ++now_;
      while (!heap_.empty() && heap_.top().deliver_tick <= now_) {
        InFlight inf = heap_.top();
        heap_.pop();
        auto it = conns_.find(inf.conn_id);
        if (it == conns_.end() || !it->second.open) continue;  // connection torn down
        Conn& c = it->second;
        NodeId dst = c.ends[1 - inf.dir];
        Frame fr = cfg_.mode == FabricMode::Stream ? read_stream_frame(c, inf) : std::move(inf.frame);
        audit_in_order(c, inf.dir, fr.seq);
        log_.push_back({now_, fr.conn_id, inf.dir, fr.seq, fr.kind,
                        fnv1a64(ByteSpan(fr.payload.data(), fr.payload.size()))});
        if (deliver_) deliver_(dst, fr);
      }
    }
  }

  // Stops new application sends from `node`; in-flight frames keep moving.
  // Returns the number of undelivered frames touching the node.
  std::size_t quiesce(NodeId node) {
    quiesced_.insert(node);
    return in_flight_count(node);
  }

  void unquiesce(NodeId node) { quiesced_.erase(node); }
  bool is_quiesced(NodeId node) const { return quiesced_.count(node) != 0; }

  std::size_t in_flight_count(NodeId node) const {
    std::size_t n = 0;
    for (const auto& info : in_flight()) {
      if (info.src == node || info.dst == node) ++n;
    }
    return n;
  }

  std::vector<InFlightInfo> in_flight() const {
    std::vector<InFlightInfo> out;
    auto copy = heap_;  // heap is small; snapshot by draining a copy
    while (!copy.empty()) {
      const InFlight& f = copy.top();
      auto it = conns_.find(f.conn_id);
      if (it != conns_.end() && it->second.open) {
        const Conn& c = it->second;
        out.push_back({f.conn_id, f.dir, f.frame.seq, f.frame.kind, f.deliver_tick, c.ends[f.dir],
                       c.ends[1 - f.dir]});
      }
      copy.pop();
    }
    return out;
  }

  void close_conn(ConnId id) {
    Conn& c = conn(id);
    c.open = false;
    close_sockets(c);
  }

  bool conn_open(ConnId id) const {
    auto it = conns_.find(id);
    return it != conns_.end() && it->second.open;
  }

  // Post-restart transport swap. Requires every connection touching the node
  // to be closed; prior connections (and their in-flight frames) are dropped.
  void teardown_and_rebind(NodeId node, FabricMode new_mode) {
    if (!has_node(node)) fail(Errc::AddressUnknown, "node " + std::to_string(node));
    for (const auto& [id, c] : conns_) {
      if (c.open && (c.ends[0] == node || c.ends[1] == node))
        fail(Errc::RebindWhileActive, "connection " + std::to_string(id) + " still open");
    }
    cfg_.mode = new_mode;
  }

  const std::vector<DeliveryRecord>& delivery_log() const { return log_; }

  std::uint64_t delivery_log_hash() const {
    Bytes buf;
    for (const auto& r : log_) {
      store_le64(buf, r.tick);
      store_le64(buf, r.conn_id);
      buf.push_back(r.direction);
      store_le64(buf, r.seq);
      buf.push_back(static_cast<std::uint8_t>(r.kind));
      store_le64(buf, r.payload_hash);
    }
    return fnv1a64(ByteSpan(buf.data(), buf.size()));
  }

private:
  struct Conn {
    NodeId ends[2] = {0, 0};
    std::uint64_t next_seq[2] = {0, 0};
    std::uint64_t delivered_seq[2] = {0, 0};  // next expected, audit only
    Tick last_sched[2] = {0, 0};
    bool open = true;
    // Stream mode: fds[i] is the socket endpoint written by ends[i].
    int fds[2] = {-1, -1};
    Bytes out_buf[2];
    Bytes in_buf[2];  // bytes read off the wire, destined for ends[1-i] reader
    std::deque<Frame> parsed[2];
  };

  struct InFlight {
    Tick deliver_tick = 0;
    std::uint64_t order = 0;
    ConnId conn_id = 0;
    std::uint8_t dir = 0;
    Frame frame;
  };

  struct InFlightLater {
    bool operator()(const InFlight& a, const InFlight& b) const {
      if (a.deliver_tick != b.deliver_tick) return a.deliver_tick > b.deliver_tick;
      return a.order > b.order;
    }
  };

  Conn& conn(ConnId id) {
    auto it = conns_.find(id);
    if (it == conns_.end()) fail(Errc::StaleHandle, "unknown connection " + std::to_string(id));
    return it->second;
  }

  static std::uint8_t direction_of(const Conn& c, NodeId from) {
    if (c.ends[0] == from) return 0;
    if (c.ends[1] == from) return 1;
    fail(Errc::AddressUnknown, "node not an endpoint of this connection");
  }

  void audit_in_order(Conn& c, std::uint8_t dir, std::uint64_t seq) {
    if (seq != c.delivered_seq[dir])
      fail(Errc::WireError, "out-of-order delivery: expected seq " +
                                std::to_string(c.delivered_seq[dir]) + " got " + std::to_string(seq));
    c.delivered_seq[dir] = seq + 1;
  }

  void open_sockets(Conn& c) {
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) != 0)
      fail(Errc::WriteFailed, "socketpair failed");
    c.fds[0] = sv[0];
    c.fds[1] = sv[1];
  }

  static void close_sockets(Conn& c) {
    for (int& fd : c.fds) {
      if (fd >= 0) {
        ::close(fd);
        fd = -1;
      }
    }
  }

  // Move bytes between the socket ends without ever blocking: flush pending
  // writes for `dir`, then read whatever arrived for its peer.
  void pump_conn(Conn& c, std::uint8_t dir) {
    Bytes& out = c.out_buf[dir];
    while (!out.empty()) {
      ssize_t n = ::send(c.fds[dir], out.data(), out.size(), MSG_DONTWAIT | MSG_NOSIGNAL);
      if (n <= 0) break;
      out.erase(out.begin(), out.begin() + n);
    }
    std::uint8_t tmp[4096];
    while (true) {
      ssize_t n = ::recv(c.fds[1 - dir], tmp, sizeof tmp, MSG_DONTWAIT);
      if (n <= 0) break;
      c.in_buf[dir].insert(c.in_buf[dir].end(), tmp, tmp + n);
    }
    parse_records(c, dir);
  }

  void parse_records(Conn& c, std::uint8_t dir) {
    Bytes& in = c.in_buf[dir];
    std::size_t pos = 0;
    while (in.size() - pos >= 4) {
      std::uint32_t len = load_be32(in.data() + pos);
      if (in.size() - pos - 4 < len) break;
      c.parsed[dir].push_back(decode_frame(ByteSpan(in.data() + pos + 4, len)));
      pos += 4 + len;
    }
    in.erase(in.begin(), in.begin() + long(pos));
  }

  Frame read_stream_frame(Conn& c, const InFlight& inf) {
    for (int spins = 0; c.parsed[inf.dir].empty(); ++spins) {
      if (spins > 10000) fail(Errc::WireError, "stream frame never arrived");
      pump_conn(c, inf.dir);
    }
    Frame f = std::move(c.parsed[inf.dir].front());
    c.parsed[inf.dir].pop_front();
    if (f.conn_id != inf.conn_id || f.seq != inf.frame.seq)
      fail(Errc::WireError, "stream frame does not match schedule");
    return f;
  }

  FabricConfig cfg_;
  Tick now_ = 0;
  std::uint64_t next_order_ = 0;
  ConnId next_conn_id_ = 1;
  std::set<NodeId> nodes_;
  std::set<NodeId> quiesced_;
  std::map<ConnId, Conn> conns_;
  std::priority_queue<InFlight, std::vector<InFlight>, InFlightLater> heap_;
  std::vector<DeliveryRecord> log_;
  DeliverFn deliver_;
};

}  // namespace ibcr
