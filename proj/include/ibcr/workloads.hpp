#pragma once

#include <memory>
#include <sstream>

#include "ibcr/hashutil.hpp"
#include "ibcr/plugin.hpp"

namespace ibcr {

// ---- transcripts: the ground-truth oracle ----

struct TranscriptEvent {
  std::uint64_t event_index = 0;
  std::uint64_t wr_id = 0;
  Opcode opcode = Opcode::Send;
  std::uint32_t byte_len = 0;
  std::uint64_t payload_hash = 0;

  bool operator==(const TranscriptEvent&) const = default;
};

class Transcript {
public:
  void append(std::uint64_t wr_id, Opcode op, std::uint32_t byte_len, std::uint64_t payload_hash) {
    events_.push_back({next_index_++, wr_id, op, byte_len, payload_hash});
  }

  const std::vector<TranscriptEvent>& events() const { return events_; }

  Sha256::Digest digest() const {
    Bytes buf;
    for (const auto& e : events_) {
      store_le64(buf, e.event_index);
      store_le64(buf, e.wr_id);
      buf.push_back(static_cast<std::uint8_t>(e.opcode));
      store_le32(buf, e.byte_len);
      store_le64(buf, e.payload_hash);
    }
    return Sha256::of(ByteSpan(buf.data(), buf.size()));
  }

  std::string digest_hex() const { return Sha256::hex(digest()); }

  void encode(Bytes& out) const {
    store_le64(out, next_index_);
    store_le32(out, static_cast<std::uint32_t>(events_.size()));
    for (const auto& e : events_) {
      store_le64(out, e.event_index);
      store_le64(out, e.wr_id);
      out.push_back(static_cast<std::uint8_t>(e.opcode));
      store_le32(out, e.byte_len);
      store_le64(out, e.payload_hash);
    }
  }

  void decode(ByteReader& r) {
    events_.clear();
    next_index_ = r.u64le();
    std::uint32_t n = r.u32le();
    for (std::uint32_t i = 0; i < n; ++i) {
      TranscriptEvent e;
      e.event_index = r.u64le();
      e.wr_id = r.u64le();
      e.opcode = static_cast<Opcode>(r.u8());
      e.byte_len = r.u32le();
      e.payload_hash = r.u64le();
      events_.push_back(e);
    }
  }

private:
  std::vector<TranscriptEvent> events_;
  std::uint64_t next_index_ = 0;
};

inline bool verify_transcripts(const Transcript& a, const Transcript& b) {
  return a.digest() == b.digest();
}

// ---- workload specification ----

enum class WorkloadKind : std::uint8_t { PingPong = 1, RdmaStream = 2, RingExchange = 3 };

struct WorkloadSpec {
  WorkloadKind kind = WorkloadKind::PingPong;
  std::uint64_t iterations = 1;
  std::uint32_t msg_size = 64;
  std::uint32_t imm_every = 0;      // 0: never; k: WRITE_WITH_IMM on every k-th write
  std::uint32_t signaled_every = 1; // unsignaled batching cadence
  std::uint64_t seed = 42;
};

inline const char* workload_name(WorkloadKind k) {
  switch (k) {
    case WorkloadKind::PingPong: return "ping_pong";
    case WorkloadKind::RdmaStream: return "rdma_stream";
    case WorkloadKind::RingExchange: return "ring_exchange";
  }
  return "?";
}

inline WorkloadKind parse_workload_kind(const std::string& name) {
  if (name == "ping_pong") return WorkloadKind::PingPong;
  if (name == "rdma_stream") return WorkloadKind::RdmaStream;
  if (name == "ring_exchange") return WorkloadKind::RingExchange;
  fail(Errc::SpecError, "unknown workload '" + name + "'");
}

inline void validate_spec(const WorkloadSpec& spec, std::size_t nodes) {
  if (spec.iterations < 1) fail(Errc::SpecError, "iterations must be >= 1");
  if (spec.msg_size < 1) fail(Errc::SpecError, "msg_size must be >= 1");
  if (spec.signaled_every < 1) fail(Errc::SpecError, "signaled_every must be >= 1");
  if (nodes < 2) fail(Errc::SpecError, "workloads need at least 2 nodes");
  if (spec.kind == WorkloadKind::RingExchange && nodes < 3)
    fail(Errc::SpecError, "ring_exchange needs at least 3 nodes");
  if (spec.kind != WorkloadKind::RingExchange && nodes != 2)
    fail(Errc::SpecError, std::string(workload_name(spec.kind)) + " runs on exactly 2 nodes");
}

// key=value lines, e.g. "workload=ping_pong\niters=100\nmsg_size=4096"
inline WorkloadSpec parse_spec_text(const std::string& text) {
  WorkloadSpec spec;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) fail(Errc::SpecError, "expected key=value: " + line);
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    try {
      if (key == "workload") spec.kind = parse_workload_kind(value);
      else if (key == "iters" || key == "iterations") spec.iterations = std::stoull(value);
      else if (key == "msg_size") spec.msg_size = std::uint32_t(std::stoul(value));
      else if (key == "imm_every") spec.imm_every = std::uint32_t(std::stoul(value));
      else if (key == "signaled_every") spec.signaled_every = std::uint32_t(std::stoul(value));
      else if (key == "seed") spec.seed = std::stoull(value);
      else fail(Errc::SpecError, "unknown spec key '" + key + "'");
    } catch (const std::invalid_argument&) {
      fail(Errc::SpecError, "bad value for '" + key + "'");
    } catch (const std::out_of_range&) {
      fail(Errc::SpecError, "value out of range for '" + key + "'");
    }
  }
  return spec;
}

// seed-derived payload for (node, iteration): any corruption or misrouting
// changes a transcript hash
inline Bytes workload_payload(const WorkloadSpec& spec, NodeId node, std::uint64_t iter,
                              std::uint32_t size) {
  Bytes out(size);
  fill_pseudo_random(out.data(), out.size(), spec.seed * 0x9E3779B9ULL + (std::uint64_t(node) << 40) +
                                                 iter + 1);
  return out;
}

// ---- per-node applications, written as explicit state machines so the
// harness can park them at any step boundary ----

struct AppContext {
  CrPlugin* plugin = nullptr;
  const WorkloadSpec* spec = nullptr;
  NodeId node = 0;
  std::size_t nnodes = 0;
  std::map<NodeId, Bytes>* side_channel = nullptr;  // app-level id exchange
};

class NodeApp {
public:
  virtual ~NodeApp() = default;

  virtual void setup(AppContext& ctx) = 0;       // create resources, publish ids
  virtual void bind_peers(AppContext& ctx) = 0;  // consume peer ids, handshake qps
  virtual bool step(AppContext& ctx) = 0;        // one small step; true when finished
  virtual std::uint64_t completed_iterations() const = 0;

  virtual Bytes save() const = 0;
  virtual void restore(AppContext& ctx, ByteSpan data) = 0;

  const Transcript& transcript() const { return transcript_; }

protected:
  // shared helpers for the concrete apps
  static constexpr std::uint64_t kDataBase = 0x1000;

  void record(const CompletionEvent& ev, std::uint64_t payload_hash) {
    transcript_.append(ev.wr_id, ev.opcode, ev.byte_len, payload_hash);
  }

  Transcript transcript_;
};

namespace appwire {

inline void put_u64(Bytes& b, std::uint64_t v) { store_le64(b, v); }

inline void put_endpoint(Bytes& b, std::uint64_t vctx, std::uint64_t vpd, std::uint64_t vmr,
                         std::uint64_t scq, std::uint64_t rcq, std::uint32_t vqp,
                         std::uint32_t vlkey, std::uint32_t vrkey) {
  store_le64(b, vctx);
  store_le64(b, vpd);
  store_le64(b, vmr);
  store_le64(b, scq);
  store_le64(b, rcq);
  store_le32(b, vqp);
  store_le32(b, vlkey);
  store_le32(b, vrkey);
}

}  // namespace appwire

// Strict request/response alternation between two nodes; at most one message
// outstanding per direction. Node 0 initiates.
class PingPongApp : public NodeApp {
public:
  explicit PingPongApp(NodeId node) : node_(node) {}

  void setup(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    const std::uint32_t sz = ctx.spec->msg_size;
    vctx_ = p.open_device(0);
    vpd_ = p.alloc_pd(vctx_);
    send_buf_ = kDataBase;
    recv_buf_ = kDataBase + sz;
    vmr_ = p.reg_mr(vpd_, kDataBase, 2ull * sz, kAccessLocalWrite | kAccessRemoteWrite);
    vlkey_ = p.mr_vlkey(vmr_);
    scq_ = p.create_cq(vctx_, 64);
    rcq_ = p.create_cq(vctx_, 64);
    vqp_ = p.create_qp(vpd_, scq_, rcq_);

    Bytes info;
    store_le16(info, p.vlid(0));
    store_le32(info, vqp_);
    (*ctx.side_channel)[node_] = info;
  }

  void bind_peers(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    NodeId peer = node_ == 0 ? 1 : 0;
    ByteReader r(ByteSpan(ctx.side_channel->at(peer).data(), ctx.side_channel->at(peer).size()));
    peer_vlid_ = r.u16le();
    peer_vqp_ = r.u32le();
    p.modify_qp(vqp_, CrPlugin::VirtTransition::to_init());
    if (node_ == 1) post_recv_for(ctx, 0);  // responder must be ready before ping 0
    p.modify_qp(vqp_, CrPlugin::VirtTransition::to_rtr(peer_vlid_, peer_vqp_));
    p.modify_qp(vqp_, CrPlugin::VirtTransition::to_rts());
  }

  bool step(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    const std::uint32_t sz = ctx.spec->msg_size;
    const std::uint64_t total = ctx.spec->iterations;
    if (iter_ >= total) return true;

    // Completions are awaited one at a time in protocol order, so the
    // transcript never depends on how checkpointing interleaves the two
    // completion queues.
    if (node_ == 0) {
      switch (phase_) {
        case 0: {  // start iteration: arm the pong recv, send the ping
          post_recv_for(ctx, iter_);
          Bytes payload = workload_payload(*ctx.spec, node_, iter_, sz);
          p.engine().mem_write(node_, send_buf_, ByteSpan(payload.data(), payload.size()));
          WorkRequest wr;
          wr.wr_id = send_wr_id(iter_);
          wr.opcode = Opcode::Send;
          wr.sg_list = {{send_buf_, sz, vlkey_}};
          p.post_send(vqp_, wr);
          phase_ = 1;
          return false;
        }
        case 1: {  // await the pong
          if (poll_recv(ctx)) phase_ = 2;
          return false;
        }
        case 2: {  // then the ping's own completion
          if (poll_send(ctx)) {
            ++iter_;
            phase_ = 0;
          }
          return iter_ >= total;
        }
      }
    } else {
      switch (phase_) {
        case 0: {  // await the ping
          if (poll_recv(ctx)) phase_ = 1;
          return false;
        }
        case 1: {  // next recv first, then answer
          if (iter_ + 1 < total) post_recv_for(ctx, iter_ + 1);
          Bytes payload = workload_payload(*ctx.spec, node_, iter_, sz);
          p.engine().mem_write(node_, send_buf_, ByteSpan(payload.data(), payload.size()));
          WorkRequest wr;
          wr.wr_id = send_wr_id(iter_);
          wr.opcode = Opcode::Send;
          wr.sg_list = {{send_buf_, sz, vlkey_}};
          p.post_send(vqp_, wr);
          phase_ = 2;
          return false;
        }
        case 2: {  // await the pong completion
          if (poll_send(ctx)) {
            ++iter_;
            phase_ = 0;
          }
          return iter_ >= total;
        }
      }
    }
    return false;
  }

  std::uint64_t completed_iterations() const override { return iter_; }

  Bytes save() const override {
    Bytes b;
    store_le64(b, iter_);
    b.push_back(phase_);
    b.push_back(saw_send_ ? 1 : 0);
    b.push_back(saw_recv_ ? 1 : 0);
    store_le16(b, peer_vlid_);
    store_le32(b, peer_vqp_);
    store_le64(b, vctx_);
    store_le64(b, vpd_);
    store_le64(b, vmr_);
    store_le64(b, scq_);
    store_le64(b, rcq_);
    store_le32(b, vqp_);
    store_le32(b, vlkey_);
    transcript_.encode(b);
    return b;
  }

  void restore(AppContext& ctx, ByteSpan data) override {
    ByteReader r(data, Errc::CorruptImage);
    iter_ = r.u64le();
    phase_ = r.u8();
    saw_send_ = r.u8() != 0;
    saw_recv_ = r.u8() != 0;
    peer_vlid_ = r.u16le();
    peer_vqp_ = r.u32le();
    vctx_ = r.u64le();
    vpd_ = r.u64le();
    vmr_ = r.u64le();
    scq_ = r.u64le();
    rcq_ = r.u64le();
    vqp_ = r.u32le();
    vlkey_ = r.u32le();
    transcript_.decode(r);
    send_buf_ = kDataBase;
    recv_buf_ = kDataBase + ctx.spec->msg_size;
  }

private:
  std::uint64_t send_wr_id(std::uint64_t i) const {
    return (std::uint64_t(node_) << 56) | (1ull << 48) | i;
  }
  std::uint64_t recv_wr_id(std::uint64_t i) const {
    return (std::uint64_t(node_) << 56) | (2ull << 48) | i;
  }

  void post_recv_for(AppContext& ctx, std::uint64_t i) {
    WorkRequest wr;
    wr.wr_id = recv_wr_id(i);
    wr.opcode = Opcode::Recv;
    wr.sg_list = {{recv_buf_, ctx.spec->msg_size, vlkey_}};
    ctx.plugin->post_recv(vqp_, wr);
  }

  bool poll_send(AppContext& ctx) {
    auto evs = ctx.plugin->poll_cq(scq_, 1);
    if (evs.empty()) return false;
    Bytes sent = ctx.plugin->engine().mem_read(node_, send_buf_, evs[0].byte_len);
    record(evs[0], fnv1a64(ByteSpan(sent.data(), sent.size())));
    return true;
  }

  bool poll_recv(AppContext& ctx) {
    auto evs = ctx.plugin->poll_cq(rcq_, 1);
    if (evs.empty()) return false;
    Bytes got = ctx.plugin->engine().mem_read(node_, recv_buf_, evs[0].byte_len);
    record(evs[0], fnv1a64(ByteSpan(got.data(), got.size())));
    return true;
  }

  NodeId node_;
  std::uint64_t iter_ = 0;
  std::uint8_t phase_ = 0;
  bool saw_send_ = false, saw_recv_ = false;  // retained in the state blob layout
  std::uint16_t peer_vlid_ = 0;
  std::uint32_t peer_vqp_ = 0;
  std::uint64_t vctx_ = 0, vpd_ = 0, vmr_ = 0, scq_ = 0, rcq_ = 0;
  std::uint32_t vqp_ = 0, vlkey_ = 0;
  std::uint64_t send_buf_ = 0, recv_buf_ = 0;
};

// One-sided stream: node 0 writes rotating slots in node 1's window,
// signaled every k-th write, optionally tagging every m-th with immediate
// data (which consumes a posted recv on node 1). Node 1's transcript ends
// with a hash of its whole window.
class RdmaStreamApp : public NodeApp {
public:
  explicit RdmaStreamApp(NodeId node) : node_(node) {}

  static constexpr std::uint32_t kSlots = 4;

  void setup(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    const std::uint32_t sz = ctx.spec->msg_size;
    vctx_ = p.open_device(0);
    vpd_ = p.alloc_pd(vctx_);
    std::uint64_t span = std::uint64_t(kSlots) * sz;
    vmr_ = p.reg_mr(vpd_, kDataBase, span,
                    kAccessLocalWrite | kAccessRemoteWrite | kAccessRemoteRead);
    vlkey_ = p.mr_vlkey(vmr_);
    vrkey_ = p.mr_vrkey(vmr_);
    scq_ = p.create_cq(vctx_, 256);
    rcq_ = p.create_cq(vctx_, 256);
    vqp_ = p.create_qp(vpd_, scq_, rcq_);

    Bytes info;
    store_le16(info, p.vlid(0));
    store_le32(info, vqp_);
    store_le32(info, vrkey_);
    store_le64(info, kDataBase);
    (*ctx.side_channel)[node_] = info;
  }

  void bind_peers(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    NodeId peer = node_ == 0 ? 1 : 0;
    ByteReader r(ByteSpan(ctx.side_channel->at(peer).data(), ctx.side_channel->at(peer).size()));
    peer_vlid_ = r.u16le();
    peer_vqp_ = r.u32le();
    peer_vrkey_ = r.u32le();
    peer_base_ = r.u64le();
    p.modify_qp(vqp_, CrPlugin::VirtTransition::to_init());
    if (node_ == 1) {
      // pre-post a recv for every immediate-tagged write
      for (std::uint64_t i = 0; i < imm_count(*ctx.spec); ++i) {
        WorkRequest wr;
        wr.wr_id = (2ull << 48) | i;
        wr.opcode = Opcode::Recv;
        wr.sg_list = {};  // imm consumes the WQE; data lands via RDMA
        ctx.plugin->post_recv(vqp_, wr);
      }
    }
    p.modify_qp(vqp_, CrPlugin::VirtTransition::to_rtr(peer_vlid_, peer_vqp_));
    p.modify_qp(vqp_, CrPlugin::VirtTransition::to_rts());
  }

  static std::uint64_t imm_count(const WorkloadSpec& spec) {
    if (spec.imm_every == 0) return 0;
    std::uint64_t n = 0;
    for (std::uint64_t i = 0; i < spec.iterations; ++i)
      if ((i + 1) % spec.imm_every == 0) ++n;
    return n;
  }

  bool step(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    const WorkloadSpec& spec = *ctx.spec;
    const std::uint32_t sz = spec.msg_size;

    if (node_ == 0) {
      if (iter_ < spec.iterations && outstanding_ < 8) {
        bool imm = spec.imm_every != 0 && (iter_ + 1) % spec.imm_every == 0;
        bool last = iter_ + 1 == spec.iterations;
        bool signaled = imm || last || (iter_ + 1) % spec.signaled_every == 0;
        std::uint32_t slot = std::uint32_t(iter_ % kSlots);
        Bytes payload = workload_payload(spec, 0, iter_, sz);
        p.engine().mem_write(0, kDataBase + slot * sz, ByteSpan(payload.data(), payload.size()));
        WorkRequest wr;
        wr.wr_id = (1ull << 48) | iter_;
        wr.opcode = imm ? Opcode::RdmaWriteImm : Opcode::RdmaWrite;
        wr.sg_list = {{kDataBase + slot * sz, sz, vlkey_}};
        wr.signaled = signaled;
        wr.remote_addr = peer_base_ + slot * sz;
        wr.rkey = peer_vrkey_;
        if (imm) wr.imm = std::uint32_t(iter_);
        if (signaled) pending_hashes_[wr.wr_id] = fnv1a64(ByteSpan(payload.data(), payload.size()));
        p.post_send(vqp_, wr);
        if (signaled) ++outstanding_;
        ++iter_;
        return false;
      }
      for (const auto& ev : p.poll_cq(scq_, 8)) {
        auto it = pending_hashes_.find(ev.wr_id);
        std::uint64_t h = it == pending_hashes_.end() ? 0 : it->second;
        if (it != pending_hashes_.end()) pending_hashes_.erase(it);
        record(ev, h);
        ++polled_signaled_;
        if (outstanding_ > 0) --outstanding_;
      }
      return iter_ >= spec.iterations && outstanding_ == 0;
    }

    // node 1: watch for immediate completions, then summarize the window
    for (const auto& ev : p.poll_cq(rcq_, 8)) {
      record(ev, ev.imm ? *ev.imm : 0);
      ++imm_seen_;
    }
    if (imm_seen_ == imm_count(spec) && !summarized_ && peer_done_) {
      Bytes window = p.engine().mem_read(1, kDataBase, std::uint64_t(kSlots) * sz);
      transcript_.append(0xF1A1, Opcode::Recv, std::uint32_t(window.size()),
                         fnv1a64(ByteSpan(window.data(), window.size())));
      summarized_ = true;
    }
    return summarized_;
  }

  // the harness tells the reader when the writer finished, standing in for an
  // application-level end-of-stream message
  void set_peer_done() { peer_done_ = true; }

  std::uint64_t completed_iterations() const override { return iter_; }
  std::uint64_t polled_signaled() const { return polled_signaled_; }

  Bytes save() const override {
    Bytes b;
    store_le64(b, iter_);
    store_le64(b, outstanding_);
    store_le64(b, imm_seen_);
    store_le64(b, polled_signaled_);
    b.push_back(summarized_ ? 1 : 0);
    b.push_back(peer_done_ ? 1 : 0);
    store_le16(b, peer_vlid_);
    store_le32(b, peer_vqp_);
    store_le32(b, peer_vrkey_);
    store_le64(b, peer_base_);
    store_le64(b, vctx_);
    store_le64(b, vpd_);
    store_le64(b, vmr_);
    store_le64(b, scq_);
    store_le64(b, rcq_);
    store_le32(b, vqp_);
    store_le32(b, vlkey_);
    store_le32(b, vrkey_);
    store_le32(b, std::uint32_t(pending_hashes_.size()));
    for (auto& [k, v] : pending_hashes_) {
      store_le64(b, k);
      store_le64(b, v);
    }
    transcript_.encode(b);
    return b;
  }

  void restore(AppContext& ctx, ByteSpan data) override {
    (void)ctx;
    ByteReader r(data, Errc::CorruptImage);
    iter_ = r.u64le();
    outstanding_ = r.u64le();
    imm_seen_ = r.u64le();
    polled_signaled_ = r.u64le();
    summarized_ = r.u8() != 0;
    peer_done_ = r.u8() != 0;
    peer_vlid_ = r.u16le();
    peer_vqp_ = r.u32le();
    peer_vrkey_ = r.u32le();
    peer_base_ = r.u64le();
    vctx_ = r.u64le();
    vpd_ = r.u64le();
    vmr_ = r.u64le();
    scq_ = r.u64le();
    rcq_ = r.u64le();
    vqp_ = r.u32le();
    vlkey_ = r.u32le();
    vrkey_ = r.u32le();
    std::uint32_t n = r.u32le();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::uint64_t k = r.u64le();
      pending_hashes_[k] = r.u64le();
    }
    transcript_.decode(r);
  }

private:
  NodeId node_;
  std::uint64_t iter_ = 0;
  std::uint64_t outstanding_ = 0;
  std::uint64_t imm_seen_ = 0;
  std::uint64_t polled_signaled_ = 0;
  bool summarized_ = false;
  bool peer_done_ = false;
  std::map<std::uint64_t, std::uint64_t> pending_hashes_;
  std::uint16_t peer_vlid_ = 0;
  std::uint32_t peer_vqp_ = 0, peer_vrkey_ = 0;
  std::uint64_t peer_base_ = 0;
  std::uint64_t vctx_ = 0, vpd_ = 0, vmr_ = 0, scq_ = 0, rcq_ = 0;
  std::uint32_t vqp_ = 0, vlkey_ = 0, vrkey_ = 0;
};

// Token rotation around n >= 3 nodes: every round each node passes a token
// to its successor. The sum of token values is conserved round by round.
class RingExchangeApp : public NodeApp {
public:
  explicit RingExchangeApp(NodeId node) : node_(node), token_value_(1000 + 7ull * node) {}

  void setup(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    const std::uint32_t sz = token_size(*ctx.spec);
    const std::uint64_t window = ctx.nnodes - 1;
    vctx_ = p.open_device(0);
    vpd_ = p.alloc_pd(vctx_);
    vmr_ = p.reg_mr(vpd_, kDataBase, (1 + window) * sz, kAccessLocalWrite | kAccessRemoteWrite);
    vlkey_ = p.mr_vlkey(vmr_);
    scq_ = p.create_cq(vctx_, 64);
    rcq_ = p.create_cq(vctx_, 64);
    // one qp toward the successor (sends), one from the predecessor (recvs)
    qp_next_ = p.create_qp(vpd_, scq_, rcq_);
    qp_prev_ = p.create_qp(vpd_, scq_, rcq_);

    Bytes info;
    store_le16(info, p.vlid(0));
    store_le32(info, qp_next_);
    store_le32(info, qp_prev_);
    (*ctx.side_channel)[node_] = info;
  }

  void bind_peers(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    NodeId next = NodeId((node_ + 1) % ctx.nnodes);
    NodeId prev = NodeId((node_ + ctx.nnodes - 1) % ctx.nnodes);
    {
      ByteReader r(ByteSpan(ctx.side_channel->at(next).data(), ctx.side_channel->at(next).size()));
      next_vlid_ = r.u16le();
      r.u32le();
      next_qp_prev_ = r.u32le();  // successor's predecessor-facing qp
    }
    {
      ByteReader r(ByteSpan(ctx.side_channel->at(prev).data(), ctx.side_channel->at(prev).size()));
      prev_vlid_ = r.u16le();
      prev_qp_next_ = r.u32le();  // predecessor's successor-facing qp
      r.u32le();
    }
    p.modify_qp(qp_next_, CrPlugin::VirtTransition::to_init());
    p.modify_qp(qp_prev_, CrPlugin::VirtTransition::to_init());
    // A peer can lead by up to n-1 rounds (one hop per ring edge), so that
    // many receives must be standing before its token can ever arrive.
    for (std::uint64_t r = 0; r + 1 < ctx.nnodes && r < ctx.spec->iterations; ++r)
      post_recv_for(ctx, r);
    p.modify_qp(qp_next_, CrPlugin::VirtTransition::to_rtr(next_vlid_, next_qp_prev_));
    p.modify_qp(qp_prev_, CrPlugin::VirtTransition::to_rtr(prev_vlid_, prev_qp_next_));
    p.modify_qp(qp_next_, CrPlugin::VirtTransition::to_rts());
    p.modify_qp(qp_prev_, CrPlugin::VirtTransition::to_rts());
  }

  static std::uint32_t token_size(const WorkloadSpec& spec) {
    return std::max<std::uint32_t>(spec.msg_size, 8);
  }

  bool step(AppContext& ctx) override {
    CrPlugin& p = *ctx.plugin;
    const WorkloadSpec& spec = *ctx.spec;
    const std::uint32_t sz = token_size(spec);
    if (round_ >= spec.iterations) return true;

    switch (phase_) {
      case 0: {  // send this round's token to the successor
        Bytes token = workload_payload(spec, node_, round_, sz);
        std::uint64_t value = token_value_;
        for (int i = 0; i < 8; ++i) token[std::size_t(i)] = std::uint8_t(value >> (8 * i));
        p.engine().mem_write(node_, kDataBase, ByteSpan(token.data(), token.size()));
        WorkRequest wr;
        wr.wr_id = (std::uint64_t(node_) << 56) | (1ull << 48) | round_;
        wr.opcode = Opcode::Send;
        wr.sg_list = {{kDataBase, sz, vlkey_}};
        p.post_send(qp_next_, wr);
        phase_ = 1;
        return false;
      }
      case 1: {  // await the predecessor's token first
        auto evs = p.poll_cq(rcq_, 1);
        if (evs.empty()) return false;
        Bytes got = p.engine().mem_read(node_, recv_slot(ctx, round_), evs[0].byte_len);
        record(evs[0], fnv1a64(ByteSpan(got.data(), got.size())));
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | got[std::size_t(i)];
        incoming_value_ = v;
        phase_ = 2;
        return false;
      }
      case 2: {  // then the send completion, and commit the round
        auto evs = p.poll_cq(scq_, 1);
        if (evs.empty()) return false;
        Bytes sent = p.engine().mem_read(node_, kDataBase, evs[0].byte_len);
        record(evs[0], fnv1a64(ByteSpan(sent.data(), sent.size())));
        token_value_ = incoming_value_;  // adopt the token that arrived
        std::uint64_t refill = round_ + ctx.nnodes - 1;  // keep the window full
        ++round_;
        if (refill < spec.iterations) post_recv_for(ctx, refill);
        phase_ = 0;
        return round_ >= spec.iterations;
      }
    }
    return false;
  }

  std::uint64_t completed_iterations() const override { return round_; }
  std::uint64_t token_value() const { return token_value_; }

  Bytes save() const override {
    Bytes b;
    store_le64(b, round_);
    b.push_back(phase_);
    b.push_back(saw_send_ ? 1 : 0);
    b.push_back(saw_recv_ ? 1 : 0);
    store_le64(b, token_value_);
    store_le64(b, incoming_value_);
    store_le16(b, next_vlid_);
    store_le32(b, next_qp_prev_);
    store_le16(b, prev_vlid_);
    store_le32(b, prev_qp_next_);
    store_le64(b, vctx_);
    store_le64(b, vpd_);
    store_le64(b, vmr_);
    store_le64(b, scq_);
    store_le64(b, rcq_);
    store_le32(b, qp_next_);
    store_le32(b, qp_prev_);
    store_le32(b, vlkey_);
    transcript_.encode(b);
    return b;
  }

  void restore(AppContext& ctx, ByteSpan data) override {
    (void)ctx;
    ByteReader r(data, Errc::CorruptImage);
    round_ = r.u64le();
    phase_ = r.u8();
    saw_send_ = r.u8() != 0;
    saw_recv_ = r.u8() != 0;
    token_value_ = r.u64le();
    incoming_value_ = r.u64le();
    next_vlid_ = r.u16le();
    next_qp_prev_ = r.u32le();
    prev_vlid_ = r.u16le();
    prev_qp_next_ = r.u32le();
    vctx_ = r.u64le();
    vpd_ = r.u64le();
    vmr_ = r.u64le();
    scq_ = r.u64le();
    rcq_ = r.u64le();
    qp_next_ = r.u32le();
    qp_prev_ = r.u32le();
    vlkey_ = r.u32le();
    transcript_.decode(r);
  }

private:
  std::uint64_t recv_slot(AppContext& ctx, std::uint64_t round) const {
    const std::uint32_t sz = token_size(*ctx.spec);
    return kDataBase + sz * (1 + round % (ctx.nnodes - 1));
  }

  void post_recv_for(AppContext& ctx, std::uint64_t round) {
    const std::uint32_t sz = token_size(*ctx.spec);
    WorkRequest wr;
    wr.wr_id = (std::uint64_t(node_) << 56) | (2ull << 48) | round;
    wr.opcode = Opcode::Recv;
    wr.sg_list = {{recv_slot(ctx, round), sz, vlkey_}};
    ctx.plugin->post_recv(qp_prev_, wr);
  }

  NodeId node_;
  std::uint64_t round_ = 0;
  std::uint8_t phase_ = 0;
  bool saw_send_ = false, saw_recv_ = false;
  std::uint64_t token_value_ = 0;
  std::uint64_t incoming_value_ = 0;
  std::uint16_t next_vlid_ = 0, prev_vlid_ = 0;
  std::uint32_t next_qp_prev_ = 0, prev_qp_next_ = 0;
  std::uint64_t vctx_ = 0, vpd_ = 0, vmr_ = 0, scq_ = 0, rcq_ = 0;
  std::uint32_t qp_next_ = 0, qp_prev_ = 0, vlkey_ = 0;
};

inline std::unique_ptr<NodeApp> make_app(const WorkloadSpec& spec, NodeId node) {
  switch (spec.kind) {
    case WorkloadKind::PingPong: return std::make_unique<PingPongApp>(node);
    case WorkloadKind::RdmaStream: return std::make_unique<RdmaStreamApp>(node);
    case WorkloadKind::RingExchange: return std::make_unique<RingExchangeApp>(node);
  }
  fail(Errc::SpecError, "unknown workload kind");
}

}  // namespace ibcr
