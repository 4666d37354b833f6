#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ibcr/state.hpp"

namespace ibcr {

// A directory triple exchanged out-of-band at connection setup and through
// the coordinator at restart.
struct DirTuple {
  std::string ns;
  Bytes key;
  Bytes value;
};

// Publish/subscribe surface the restart flow needs; backed by the in-process
// coordinator core or by a TCP client.
struct DirectorySession {
  std::function<void(const std::string& ns, Bytes key, Bytes value)> publish;
  std::function<std::vector<std::pair<Bytes, Bytes>>(const std::string& ns)> subscribe;
};

// Application-visible view of one resource, for tests asserting virtual-id
// stability and real-id freshness.
struct ShadowInfo {
  ResourceKind kind = ResourceKind::Ctx;
  std::uint64_t virtual_id = 0;
  std::uint64_t real_ref = 0;

  auto operator<=>(const ShadowInfo&) const = default;
};

struct PluginConfig {
  IdPolicy id_policy = IdPolicy::RealEqualsVirtualAtCreate;
  Tick drain_interval_ticks = 100;
  std::size_t drain_max_rounds = 16;
  bool capture_inline_payloads = true;
};

// The interposition layer. The application sees only virtual ids; every call
// funnels through here (post/poll via the rebound dispatch table), gets its
// ids translated, and leaves a replayable record behind. Checkpoint drains
// the real completion queues into a private queue served back before any
// real poll; restart recreates every resource against a fresh engine epoch
// with new real ids behind the same virtual ids.
class CrPlugin {
public:
  CrPlugin(NodeId node, VerbsEngine& engine, PluginConfig cfg = {})
      : node_(node), engine_(&engine), cfg_(cfg) {
    translation_.policy = cfg.id_policy;
  }

  NodeId node() const { return node_; }
  const PluginConfig& config() const { return cfg_; }
  VerbsEngine& engine() { return *engine_; }

  // ---- creation wrappers: the application only ever holds shadow ids ----

  std::uint64_t open_device(std::uint32_t port) {
    CtxId real = engine_->open_device({node_, port});
    std::uint64_t vctx = alloc_vid(real.v);
    CtxShadow sh;
    sh.real = real;
    sh.port = port;
    sh.native = engine_->dispatch(real);
    install_wrappers(real);
    ctxs_[vctx] = std::move(sh);
    translation_.ctx[vctx] = real.v;

    std::uint16_t lid = engine_->lid_of(node_, port);
    if (!port_vlid_.count(port)) port_vlid_[port] = alloc_vlid(lid);
    translation_.vlid_to_lid[port_vlid_[port]] = lid;

    CreationRecord rec;
    rec.kind = ResourceKind::Ctx;
    rec.virtual_id = vctx;
    rec.port_index = port;
    rec.vlid = port_vlid_[port];
    creations_.push_back(rec);
    return vctx;
  }

  std::uint64_t alloc_pd(std::uint64_t vctx) {
    CtxShadow& c = ctx_shadow(vctx);
    PdId real = engine_->alloc_pd(c.real);
    std::uint64_t vpd = alloc_vid(real.v);
    pds_[vpd] = {real, vctx, engine_->pd_uid(real)};
    translation_.pd[vpd] = real.v;

    CreationRecord rec;
    rec.kind = ResourceKind::Pd;
    rec.virtual_id = vpd;
    rec.ctx_vid = vctx;
    creations_.push_back(rec);
    return vpd;
  }

  std::uint64_t reg_mr(std::uint64_t vpd, std::uint64_t base, std::uint64_t length,
                       std::uint32_t access) {
    PdShadow& p = pd_shadow(vpd);
    MrId real = engine_->reg_mr(p.real, base, length, access);
    std::uint32_t lkey = engine_->mr_lkey(real);
    std::uint32_t rkey = engine_->mr_rkey(real);
    std::uint64_t vmr = alloc_vid(real.v);
    std::uint32_t vlkey = alloc_vkey(lkey);
    std::uint32_t vrkey = alloc_vkey(rkey);
    mrs_[vmr] = {real, vpd, base, length, access, vlkey, vrkey};
    translation_.mr[vmr] = real.v;
    translation_.vlkey_to_lkey[vlkey] = lkey;
    translation_.vrkey_to_rkey[vrkey] = rkey;

    CreationRecord rec;
    rec.kind = ResourceKind::Mr;
    rec.virtual_id = vmr;
    rec.pd_vid = vpd;
    rec.base_addr = base;
    rec.length = length;
    rec.access = access;
    rec.vlkey = vlkey;
    rec.vrkey = vrkey;
    creations_.push_back(rec);
    return vmr;
  }

  std::uint64_t create_cq(std::uint64_t vctx, std::size_t capacity) {
    CtxShadow& c = ctx_shadow(vctx);
    CqId real = engine_->create_cq(c.real, capacity);
    std::uint64_t vcq = alloc_vid(real.v);
    cqs_[vcq] = {real, vctx, capacity};
    translation_.cq[vcq] = real.v;
    private_cq_.try_emplace(vcq);

    CreationRecord rec;
    rec.kind = ResourceKind::Cq;
    rec.virtual_id = vcq;
    rec.ctx_vid = vctx;
    rec.capacity = capacity;
    creations_.push_back(rec);
    return vcq;
  }

  std::uint64_t create_srq(std::uint64_t vpd, std::uint32_t limit) {
    PdShadow& p = pd_shadow(vpd);
    SrqId real = engine_->create_srq(p.real, limit);
    std::uint64_t vsrq = alloc_vid(real.v);
    srqs_[vsrq] = {real, vpd};
    translation_.srq[vsrq] = real.v;

    CreationRecord rec;
    rec.kind = ResourceKind::Srq;
    rec.virtual_id = vsrq;
    rec.pd_vid = vpd;
    rec.srq_limit = limit;
    creations_.push_back(rec);
    return vsrq;
  }

  std::uint32_t create_qp(std::uint64_t vpd, std::uint64_t v_send_cq, std::uint64_t v_recv_cq,
                          std::optional<std::uint64_t> vsrq = {}) {
    PdShadow& p = pd_shadow(vpd);
    CqShadow& scq = cq_shadow(v_send_cq);
    CqShadow& rcq = cq_shadow(v_recv_cq);
    std::optional<SrqId> real_srq;
    if (vsrq) real_srq = srq_shadow(*vsrq).real;
    std::uint32_t real = engine_->create_qp(p.real, scq.real, rcq.real, real_srq);
    std::uint32_t vqp = alloc_vqp(real);
    QpShadow sh;
    sh.real = real;
    sh.pd_vid = vpd;
    sh.send_cq_vid = v_send_cq;
    sh.recv_cq_vid = v_recv_cq;
    sh.srq_vid = vsrq;
    qps_[vqp] = sh;
    translation_.qp[vqp] = real;
    translation_.vqp_to_qp[vqp] = real;
    real_to_vqp_[real] = vqp;

    CreationRecord rec;
    rec.kind = ResourceKind::Qp;
    rec.virtual_id = vqp;
    rec.pd_vid = vpd;
    rec.send_cq_vid = v_send_cq;
    rec.recv_cq_vid = v_recv_cq;
    rec.srq_vid = vsrq;
    rec.vqp_num = vqp;
    creations_.push_back(rec);
    return vqp;
  }

  std::uint16_t vlid(std::uint32_t port) const {
    auto it = port_vlid_.find(port);
    if (it == port_vlid_.end()) fail(Errc::StaleHandle, "no context opened on this port");
    return it->second;
  }

  std::uint32_t mr_vlkey(std::uint64_t vmr) { return mr_shadow(vmr).vlkey; }
  std::uint32_t mr_vrkey(std::uint64_t vmr) { return mr_shadow(vmr).vrkey; }
  std::uint64_t pd_uid_of(std::uint64_t vpd) { return pd_shadow(vpd).uid; }

  // ---- connection setup / modify ----

  struct VirtTransition {
    QpState target = QpState::Init;
    std::uint16_t remote_vlid = 0;
    std::uint32_t remote_vqp = 0;

    static VirtTransition to_init() { return {QpState::Init, 0, 0}; }
    static VirtTransition to_rtr(std::uint16_t vlid, std::uint32_t vqp) {
      return {QpState::Rtr, vlid, vqp};
    }
    static VirtTransition to_rts() { return {QpState::Rts, 0, 0}; }
  };

  void modify_qp(std::uint32_t vqp, const VirtTransition& t) {
    QpShadow& q = qp_shadow(vqp);
    ModifyRecord rec;
    rec.vqp = vqp;
    rec.target = t.target;
    rec.remote_vlid = t.remote_vlid;
    rec.remote_vqp_num = t.remote_vqp;
    apply_modify(q, rec);
    modifies_.push_back(rec);
  }

  // ---- posting and polling (through the rebound dispatch slots) ----

  void post_send(std::uint32_t vqp, const WorkRequest& vwr) {
    QpShadow& q = qp_shadow(vqp);
    dispatch_of(q).post_send(vqp, vwr);
  }

  void post_recv(std::uint32_t vqp, const WorkRequest& vwr) {
    QpShadow& q = qp_shadow(vqp);
    dispatch_of(q).post_recv(vqp, vwr);
  }

  void post_srq_recv(std::uint64_t vsrq, const WorkRequest& vwr) {
    SrqShadow& s = srq_shadow(vsrq);
    const PdShadow& p = pd_shadow(s.pd_vid);
    engine_->dispatch(ctx_shadow(p.ctx_vid).real).post_srq_recv(SrqId{vsrq}, vwr);
  }

  std::vector<CompletionEvent> poll_cq(std::uint64_t vcq, std::size_t max) {
    CqShadow& c = cq_shadow(vcq);
    return dispatch_for_cq(c).poll_cq(CqId{vcq}, max);
  }

  // ---- directory exchange ----

  std::vector<DirTuple> export_directory_tuples() const {
    std::vector<DirTuple> out;
    for (const auto& [port, vl] : port_vlid_) {
      Bytes k, v;
      store_le64(k, vl);
      store_le64(v, translation_.vlid_to_lid.at(vl));
      out.push_back({"lid", k, v});
    }
    for (const auto& [vqp, q] : qps_) {
      Bytes k1, v1;
      store_le64(k1, vqp);
      store_le64(v1, pds_.at(q.pd_vid).uid);
      out.push_back({"qp_pd", k1, v1});
      Bytes k2, v2;
      store_le64(k2, vqp);
      store_le64(v2, q.real);
      out.push_back({"qp_real", k2, v2});
    }
    for (const auto& [vmr, m] : mrs_) {
      Bytes k, v;
      store_le64(k, m.vrkey);
      store_le64(k, pds_.at(m.pd_vid).uid);
      store_le64(v, translation_.vrkey_to_rkey.at(m.vrkey));
      out.push_back({"vrkey_pd_rkey", k, v});
    }
    return out;
  }

  void import_directory_tuples(const std::vector<DirTuple>& tuples) {
    for (const auto& t : tuples) ingest_tuple(t.ns, t.key, t.value);
  }

  // ---- checkpoint hooks ----

  // One drain round over every completion queue; events move into the
  // private per-vcq queues with virtual ids, and the WQE log is pruned.
  std::size_t drain_once() {
    std::size_t total = 0;
    for (auto& [vcq, sh] : cqs_) {
      while (true) {
        auto evs = engine_->poll_cq(sh.real, 64);
        if (evs.empty()) break;
        for (auto& ev : evs) {
          virtualize_event(ev);
          prune_wqe_log(ev);
          private_cq_[vcq].push_back(ev);
          ++total;
        }
      }
    }
    return total;
  }

  // Initial drain, then repeated rounds spaced drain_interval_ticks of
  // virtual time apart until a post-wait round sees nothing (or the round
  // budget is exhausted); completions the network posts late land in one of
  // the waited-for rounds. Single-node form; multi-node checkpoints run the
  // same rounds in lockstep through the coordinator broadcast.
  DrainReport on_checkpoint() {
    DrainReport report;
    while (true) {
      std::size_t n = drain_once();
      report.events_drained += n;
      ++report.rounds;
      if ((n == 0 && report.rounds > 1) || report.rounds >= cfg_.drain_max_rounds) break;
      engine_->progress(cfg_.drain_interval_ticks);
    }
    report.wqes_outstanding = wqe_log_.size();
    for (const auto& f : engine_->fabric().in_flight()) {
      if (f.kind == FrameKind::DeliveryAck) continue;
      if (f.src == node_ || f.dst == node_) ++report.in_flight_ignored;
    }
    return report;
  }

  // Resume re-posts nothing: the real queues still hold their entries; the
  // private completion queue is served before any real poll.
  void on_resume() {}

  NodeCheckpointState capture_state(Bytes workload_state) const {
    NodeCheckpointState st;
    st.node_id = node_;
    st.epoch = engine_->epoch();
    for (const auto& [vmr, m] : mrs_)
      st.memory.push_back({m.base, engine_->mem_read(node_, m.base, m.length)});
    st.creations = creations_;
    st.modifies = modifies_;
    st.wqe_log = wqe_log_;
    for (const auto& [vcq, q] : private_cq_)
      for (const auto& ev : q) st.drained.push_back({vcq, ev});
    st.translation = translation_;
    st.workload_state = std::move(workload_state);
    return st;
  }

  // ---- restart (new engine epoch, new real ids) ----

  // Step 1: replay every creation against the fresh engine and restore
  // memory contents. Virtual ids are preserved; real ids are whatever the
  // new epoch hands out.
  void restart_recreate(VerbsEngine& fresh_engine, const NodeCheckpointState& st) {
    engine_ = &fresh_engine;
    node_ = st.node_id;
    ctxs_.clear();
    pds_.clear();
    mrs_.clear();
    cqs_.clear();
    srqs_.clear();
    qps_.clear();
    real_to_vqp_.clear();
    port_vlid_.clear();
    private_cq_.clear();
    dir_qp_pd_.clear();
    dir_vrkey_.clear();
    dir_lid_.clear();
    dir_qp_real_.clear();

    translation_ = st.translation;
    translation_.restarted = true;
    translation_.ctx.clear();
    translation_.pd.clear();
    translation_.mr.clear();
    translation_.cq.clear();
    translation_.qp.clear();
    translation_.srq.clear();
    translation_.vlkey_to_lkey.clear();
    translation_.vrkey_to_rkey.clear();
    translation_.vlid_to_lid.clear();
    translation_.vqp_to_qp.clear();
    creations_ = st.creations;
    modifies_ = st.modifies;
    wqe_log_ = st.wqe_log;

    for (const auto& rec : creations_) replay_creation(rec);
    for (const auto& m : st.memory)
      engine_->mem_write(node_, m.base_addr, ByteSpan(m.bytes.data(), m.bytes.size()));
    for (const auto& d : st.drained) private_cq_[d.vcq].push_back(d.event);
  }

  // Step 2: publish the new real ids behind every virtual id.
  void restart_publish(const DirectorySession& session) const {
    for (const auto& t : export_directory_tuples()) session.publish(t.ns, t.key, t.value);
  }

  // Steps 3-4: subscribe the directory and replay the modify log with remote
  // virtual ids translated to the new real ids.
  void restart_rebind(const DirectorySession& session) {
    for (const char* ns : {"lid", "qp_pd", "vrkey_pd_rkey", "qp_real"})
      for (auto& [k, v] : session.subscribe(ns))
        ingest_tuple(ns, k, v);
    for (const auto& rec : modifies_) apply_modify(qp_shadow(std::uint32_t(rec.vqp)), rec);
  }

  // Step 5: re-post every outstanding work queue entry, original order.
  void restart_repost() {
    for (const auto& e : wqe_log_) {
      switch (e.queue) {
        case WqeQueueKind::Send: {
          QpShadow& q = qp_shadow(std::uint32_t(e.owner_vid));
          WorkRequest real_wr = translate_send_wr(q, e.wr);
          engine_->post_send_captured(q.real, real_wr, e.captured_payload);
          break;
        }
        case WqeQueueKind::Recv: {
          QpShadow& q = qp_shadow(std::uint32_t(e.owner_vid));
          engine_->post_recv(q.real, translate_recv_wr(e.wr));
          break;
        }
        case WqeQueueKind::SrqRecv: {
          SrqShadow& s = srq_shadow(e.owner_vid);
          engine_->post_srq_recv(s.real, translate_recv_wr(e.wr));
          break;
        }
      }
    }
  }

  // ---- introspection for tests ----

  std::vector<ShadowInfo> shadow_set() const {
    std::vector<ShadowInfo> out;
    for (const auto& [vid, sh] : ctxs_) out.push_back({ResourceKind::Ctx, vid, sh.real.v});
    for (const auto& [vid, sh] : pds_) out.push_back({ResourceKind::Pd, vid, sh.real.v});
    for (const auto& [vid, sh] : mrs_) out.push_back({ResourceKind::Mr, vid, sh.real.v});
    for (const auto& [vid, sh] : cqs_) out.push_back({ResourceKind::Cq, vid, sh.real.v});
    for (const auto& [vid, sh] : srqs_) out.push_back({ResourceKind::Srq, vid, sh.real.v});
    for (const auto& [vid, sh] : qps_) out.push_back({ResourceKind::Qp, vid, sh.real});
    std::sort(out.begin(), out.end());
    return out;
  }

  const std::vector<WqeLogEntry>& wqe_log() const { return wqe_log_; }
  const std::vector<CreationRecord>& creation_log() const { return creations_; }
  const std::vector<ModifyRecord>& modify_log() const { return modifies_; }
  const TranslationState& translation() const { return translation_; }

  std::size_t private_queue_depth(std::uint64_t vcq) const {
    auto it = private_cq_.find(vcq);
    return it == private_cq_.end() ? 0 : it->second.size();
  }

  std::uint32_t real_qp_num(std::uint32_t vqp) { return qp_shadow(vqp).real; }
  std::uint32_t real_rkey(std::uint32_t vrkey) const {
    return translation_.vrkey_to_rkey.at(vrkey);
  }
  std::uint16_t real_lid(std::uint16_t virt) const { return translation_.vlid_to_lid.at(virt); }

  // The full resolution chain a posted RDMA request would take.
  std::uint32_t resolve_vrkey_for(std::uint32_t vqp, std::uint32_t vrkey) {
    return resolve_vrkey(qp_shadow(vqp), vrkey);
  }

private:
  struct CtxShadow {
    CtxId real;
    std::uint32_t port = 0;
    DispatchTable native;
  };

  struct PdShadow {
    PdId real;
    std::uint64_t ctx_vid = 0;
    std::uint64_t uid = 0;
  };

  struct MrShadow {
    MrId real;
    std::uint64_t pd_vid = 0;
    std::uint64_t base = 0;
    std::uint64_t length = 0;
    std::uint32_t access = 0;
    std::uint32_t vlkey = 0;
    std::uint32_t vrkey = 0;
  };

  struct CqShadow {
    CqId real;
    std::uint64_t ctx_vid = 0;
    std::size_t capacity = 0;
  };

  struct SrqShadow {
    SrqId real;
    std::uint64_t pd_vid = 0;
  };

  struct QpShadow {
    std::uint32_t real = 0;
    std::uint64_t pd_vid = 0;
    std::uint64_t send_cq_vid = 0;
    std::uint64_t recv_cq_vid = 0;
    std::optional<std::uint64_t> srq_vid;
    std::optional<std::uint16_t> remote_vlid;
    std::optional<std::uint32_t> remote_vqp;
    std::uint64_t send_posts = 0;
    std::uint64_t recv_posts = 0;
  };

  // ---- shadow lookups ----

  template <class M>
  static auto& find_shadow(M& m, std::uint64_t vid, const char* what) {
    auto it = m.find(vid);
    if (it == m.end()) fail(Errc::StaleHandle, std::string("virtual ") + what);
    return it->second;
  }

  CtxShadow& ctx_shadow(std::uint64_t v) { return find_shadow(ctxs_, v, "context"); }
  PdShadow& pd_shadow(std::uint64_t v) { return find_shadow(pds_, v, "protection domain"); }
  MrShadow& mr_shadow(std::uint64_t v) { return find_shadow(mrs_, v, "memory region"); }
  CqShadow& cq_shadow(std::uint64_t v) { return find_shadow(cqs_, v, "completion queue"); }
  SrqShadow& srq_shadow(std::uint64_t v) { return find_shadow(srqs_, v, "shared receive queue"); }
  QpShadow& qp_shadow(std::uint32_t v) { return find_shadow(qps_, v, "queue pair"); }
  const PdShadow& pd_shadow(std::uint64_t v) const { return find_shadow(pds_, v, "protection domain"); }

  const DispatchTable& dispatch_of(QpShadow& q) {
    const PdShadow& p = pd_shadow(q.pd_vid);
    return engine_->dispatch(ctx_shadow(p.ctx_vid).real);
  }

  const DispatchTable& dispatch_for_cq(CqShadow& c) {
    return engine_->dispatch(ctx_shadow(c.ctx_vid).real);
  }

  // ---- virtual id allocation ----

  bool node_scoped_ids() const {
    return translation_.policy == IdPolicy::GloballyUniqueVirtual || translation_.restarted;
  }

  std::uint64_t alloc_vid(std::uint64_t real) {
    if (!node_scoped_ids()) return real;
    return (std::uint64_t(node_) << 32) | translation_.next_virtual++;
  }

  std::uint32_t alloc_vkey(std::uint32_t real) {
    if (!node_scoped_ids()) return real;
    return (std::uint32_t(node_) << 24) | std::uint32_t(translation_.next_virtual++ & 0xFFFFFF);
  }

  std::uint32_t alloc_vqp(std::uint32_t real) {
    if (!node_scoped_ids()) return real;
    return (std::uint32_t(node_ + 1) << 24) | std::uint32_t(translation_.next_virtual++ & 0xFFFFFF);
  }

  std::uint16_t alloc_vlid(std::uint16_t real) {
    if (!node_scoped_ids()) return real;
    return std::uint16_t((std::uint16_t(node_) << 12) |
                         std::uint16_t(translation_.next_virtual++ & 0xFFF));
  }

  // ---- dispatch wrappers: translate, record, forward ----

  void install_wrappers(CtxId real_ctx) {
    DispatchTable native = engine_->dispatch(real_ctx);
    DispatchTable wrapped;
    wrapped.post_send = [this, native](std::uint32_t vqp, const WorkRequest& vwr) {
      QpShadow& q = qp_shadow(vqp);
      WorkRequest real_wr = translate_send_wr(q, vwr);
      WqeLogEntry e;
      e.queue = WqeQueueKind::Send;
      e.owner_vid = vqp;
      e.post_idx = q.send_posts++;
      e.wr = vwr;
      if (vwr.inline_data && cfg_.capture_inline_payloads)
        e.captured_payload = gather_local(q, vwr);
      wqe_log_.push_back(std::move(e));
      native.post_send(q.real, real_wr);
    };
    wrapped.post_recv = [this, native](std::uint32_t vqp, const WorkRequest& vwr) {
      QpShadow& q = qp_shadow(vqp);
      WqeLogEntry e;
      e.queue = WqeQueueKind::Recv;
      e.owner_vid = vqp;
      e.post_idx = q.recv_posts++;
      e.wr = vwr;
      wqe_log_.push_back(std::move(e));
      native.post_recv(q.real, translate_recv_wr(vwr));
    };
    wrapped.post_srq_recv = [this, native](SrqId vsrq, const WorkRequest& vwr) {
      SrqShadow& s = srq_shadow(vsrq.v);
      WqeLogEntry e;
      e.queue = WqeQueueKind::SrqRecv;
      e.owner_vid = vsrq.v;
      e.post_idx = srq_posts_[vsrq.v]++;
      e.wr = vwr;
      wqe_log_.push_back(std::move(e));
      native.post_srq_recv(s.real, translate_recv_wr(vwr));
    };
    wrapped.poll_cq = [this, native](CqId vcq, std::size_t max) {
      auto& priv = private_cq_[vcq.v];
      if (!priv.empty()) {
        // Serve the refilled virtual completion queue first; never mix
        // private and real events in one call.
        std::vector<CompletionEvent> out;
        while (out.size() < max && !priv.empty()) {
          out.push_back(priv.front());
          priv.pop_front();
        }
        return out;
      }
      CqShadow& c = cq_shadow(vcq.v);
      auto evs = native.poll_cq(c.real, max);
      for (auto& ev : evs) {
        virtualize_event(ev);
        prune_wqe_log(ev);
      }
      return evs;
    };
    engine_->rebind_dispatch(real_ctx, std::move(wrapped));
  }

  Bytes gather_local(QpShadow& q, const WorkRequest& vwr) {
    Bytes out;
    for (const Sge& sg : vwr.sg_list) {
      Bytes part = engine_->mem_read(node_, sg.addr, sg.length);
      out.insert(out.end(), part.begin(), part.end());
    }
    (void)q;
    return out;
  }

  WorkRequest translate_recv_wr(const WorkRequest& vwr) const {
    WorkRequest wr = vwr;
    for (Sge& sg : wr.sg_list) sg.lkey = lkey_of(sg.lkey);
    return wr;
  }

  // The vrkey resolution chain: local vqp -> remote vqp -> remote pd uid ->
  // (vrkey, pd) -> rkey.
  WorkRequest translate_send_wr(QpShadow& q, const WorkRequest& vwr) const {
    WorkRequest wr = vwr;
    for (Sge& sg : wr.sg_list) sg.lkey = lkey_of(sg.lkey);
    if (wr.rkey) wr.rkey = resolve_vrkey(q, *wr.rkey);
    return wr;
  }

  std::uint32_t lkey_of(std::uint32_t vlkey) const {
    auto it = translation_.vlkey_to_lkey.find(vlkey);
    if (it == translation_.vlkey_to_lkey.end())
      fail(Errc::StaleHandle, "unknown vlkey " + std::to_string(vlkey));
    return it->second;
  }

  std::uint32_t resolve_vrkey(const QpShadow& q, std::uint32_t vrkey) const {
    if (!q.remote_vqp)
      fail(Errc::UnknownRemoteVirtualId, "qp has no remote bound");
    auto pd_it = dir_qp_pd_.find(*q.remote_vqp);
    if (pd_it == dir_qp_pd_.end())
      fail(Errc::UnknownRemoteVirtualId, "no pd published for remote vqp " +
                                             std::to_string(*q.remote_vqp));
    auto rk_it = dir_vrkey_.find({vrkey, pd_it->second});
    if (rk_it == dir_vrkey_.end())
      fail(Errc::UnknownVrkey, "no rkey published for vrkey " + std::to_string(vrkey));
    return rk_it->second;
  }

  void apply_modify(QpShadow& q, const ModifyRecord& rec) {
    switch (rec.target) {
      case QpState::Init:
        engine_->modify_qp(q.real, QpTransition::to_init());
        return;
      case QpState::Rtr: {
        auto lid_it = dir_lid_.find(rec.remote_vlid);
        auto qp_it = dir_qp_real_.find(rec.remote_vqp_num);
        if (lid_it == dir_lid_.end() || qp_it == dir_qp_real_.end())
          fail(translation_.restarted ? Errc::RestartDirectoryIncomplete
                                      : Errc::UnknownRemoteVirtualId,
               "remote ids not resolvable for TO_RTR");
        engine_->modify_qp(q.real, QpTransition::to_rtr(lid_it->second, qp_it->second));
        q.remote_vlid = rec.remote_vlid;
        q.remote_vqp = rec.remote_vqp_num;
        return;
      }
      case QpState::Rts:
        engine_->modify_qp(q.real, QpTransition::to_rts());
        return;
      default:
        fail(Errc::InvalidTransition, "unsupported transition");
    }
  }

  void ingest_tuple(const std::string& ns, const Bytes& key, const Bytes& value) {
    ByteReader kr(ByteSpan(key.data(), key.size()));
    ByteReader vr(ByteSpan(value.data(), value.size()));
    if (ns == "lid") {
      auto k = std::uint16_t(kr.u64le());
      dir_lid_[k] = std::uint16_t(vr.u64le());
    } else if (ns == "qp_pd") {
      auto k = std::uint32_t(kr.u64le());
      dir_qp_pd_[k] = vr.u64le();
    } else if (ns == "qp_real") {
      auto k = std::uint32_t(kr.u64le());
      dir_qp_real_[k] = std::uint32_t(vr.u64le());
    } else if (ns == "vrkey_pd_rkey") {
      auto vrkey = std::uint32_t(kr.u64le());
      std::uint64_t pd = kr.u64le();
      dir_vrkey_[{vrkey, pd}] = std::uint32_t(vr.u64le());
    } else {
      fail(Errc::InvalidNamespace, ns);
    }
  }

  void virtualize_event(CompletionEvent& ev) const {
    auto it = real_to_vqp_.find(ev.qp_num);
    if (it != real_to_vqp_.end()) ev.qp_num = it->second;
  }

  // Any polled or drained completion retires its WQE-log entry; a signaled
  // success on a send queue also retires earlier unsignaled sends there,
  // since delivery is in order.
  void prune_wqe_log(const CompletionEvent& ev) {
    std::uint32_t vqp = ev.qp_num;  // already virtualized
    auto qit = qps_.find(vqp);
    bool recv_side = ev.opcode == Opcode::Recv;
    WqeQueueKind kind = WqeQueueKind::Send;
    std::uint64_t owner = vqp;
    if (recv_side) {
      if (qit != qps_.end() && qit->second.srq_vid) {
        kind = WqeQueueKind::SrqRecv;
        owner = *qit->second.srq_vid;
      } else {
        kind = WqeQueueKind::Recv;
      }
    }
    auto match = wqe_log_.end();
    for (auto it = wqe_log_.begin(); it != wqe_log_.end(); ++it) {
      if (it->queue == kind && it->owner_vid == owner && it->wr.wr_id == ev.wr_id) {
        if (match == wqe_log_.end() || it->post_idx < match->post_idx) match = it;
      }
    }
    if (match == wqe_log_.end()) return;
    std::uint64_t idx = match->post_idx;
    bool covering = !recv_side && ev.status == WcStatus::Success && match->wr.signaled;
    wqe_log_.erase(match);
    if (covering) {
      std::erase_if(wqe_log_, [&](const WqeLogEntry& e) {
        return e.queue == WqeQueueKind::Send && e.owner_vid == owner && !e.wr.signaled &&
               e.post_idx < idx;
      });
    }
  }

  void replay_creation(const CreationRecord& rec) {
    switch (rec.kind) {
      case ResourceKind::Ctx: {
        CtxId real = engine_->open_device({node_, rec.port_index});
        CtxShadow sh;
        sh.real = real;
        sh.port = rec.port_index;
        sh.native = engine_->dispatch(real);
        install_wrappers(real);
        ctxs_[rec.virtual_id] = std::move(sh);
        translation_.ctx[rec.virtual_id] = real.v;
        // virtual lid is stable; it now resolves to the fresh epoch's lid
        port_vlid_[rec.port_index] = rec.vlid;
        translation_.vlid_to_lid[rec.vlid] = engine_->lid_of(node_, rec.port_index);
        return;
      }
      case ResourceKind::Pd: {
        PdId real = engine_->alloc_pd(ctx_shadow(rec.ctx_vid).real);
        pds_[rec.virtual_id] = {real, rec.ctx_vid, engine_->pd_uid(real)};
        translation_.pd[rec.virtual_id] = real.v;
        return;
      }
      case ResourceKind::Mr: {
        MrId real = engine_->reg_mr(pd_shadow(rec.pd_vid).real, rec.base_addr, rec.length,
                                    rec.access);
        mrs_[rec.virtual_id] = {real,      rec.pd_vid, rec.base_addr, rec.length,
                                rec.access, rec.vlkey,  rec.vrkey};
        translation_.mr[rec.virtual_id] = real.v;
        translation_.vlkey_to_lkey[rec.vlkey] = engine_->mr_lkey(real);
        translation_.vrkey_to_rkey[rec.vrkey] = engine_->mr_rkey(real);
        return;
      }
      case ResourceKind::Cq: {
        CqId real = engine_->create_cq(ctx_shadow(rec.ctx_vid).real, rec.capacity);
        cqs_[rec.virtual_id] = {real, rec.ctx_vid, rec.capacity};
        translation_.cq[rec.virtual_id] = real.v;
        private_cq_.try_emplace(rec.virtual_id);
        return;
      }
      case ResourceKind::Srq: {
        SrqId real = engine_->create_srq(pd_shadow(rec.pd_vid).real, rec.srq_limit);
        srqs_[rec.virtual_id] = {real, rec.pd_vid};
        translation_.srq[rec.virtual_id] = real.v;
        return;
      }
      case ResourceKind::Qp: {
        std::optional<SrqId> srq;
        if (rec.srq_vid) srq = srq_shadow(*rec.srq_vid).real;
        std::uint32_t real = engine_->create_qp(pd_shadow(rec.pd_vid).real,
                                                cq_shadow(rec.send_cq_vid).real,
                                                cq_shadow(rec.recv_cq_vid).real, srq);
        QpShadow sh;
        sh.real = real;
        sh.pd_vid = rec.pd_vid;
        sh.send_cq_vid = rec.send_cq_vid;
        sh.recv_cq_vid = rec.recv_cq_vid;
        sh.srq_vid = rec.srq_vid;
        qps_[rec.vqp_num] = sh;
        translation_.qp[rec.vqp_num] = real;
        translation_.vqp_to_qp[rec.vqp_num] = real;
        real_to_vqp_[real] = rec.vqp_num;
        return;
      }
    }
  }

  NodeId node_;
  VerbsEngine* engine_;
  PluginConfig cfg_;

  std::map<std::uint64_t, CtxShadow> ctxs_;
  std::map<std::uint64_t, PdShadow> pds_;
  std::map<std::uint64_t, MrShadow> mrs_;
  std::map<std::uint64_t, CqShadow> cqs_;
  std::map<std::uint64_t, SrqShadow> srqs_;
  std::map<std::uint32_t, QpShadow> qps_;
  std::map<std::uint32_t, std::uint32_t> real_to_vqp_;
  std::map<std::uint32_t, std::uint16_t> port_vlid_;
  std::map<std::uint64_t, std::uint64_t> srq_posts_;

  TranslationState translation_;
  std::vector<CreationRecord> creations_;
  std::vector<ModifyRecord> modifies_;
  std::vector<WqeLogEntry> wqe_log_;
  std::map<std::uint64_t, std::deque<CompletionEvent>> private_cq_;

  // directory: remote (and own) id resolution
  std::map<std::uint32_t, std::uint64_t> dir_qp_pd_;
  std::map<std::pair<std::uint32_t, std::uint64_t>, std::uint32_t> dir_vrkey_;
  std::map<std::uint16_t, std::uint16_t> dir_lid_;
  std::map<std::uint32_t, std::uint32_t> dir_qp_real_;
};

}  // namespace ibcr
