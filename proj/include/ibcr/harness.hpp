#pragma once

#include <filesystem>

#include "ibcr/coordinator.hpp"
#include "ibcr/image.hpp"
#include "ibcr/workloads.hpp"

namespace ibcr {

enum class CkptAction : std::uint8_t {
  Resume = 1,
  Restart = 2,
  RestartMigrateStream = 3,
  RestartConsolidate = 4,
};

inline const char* action_name(CkptAction a) {
  switch (a) {
    case CkptAction::Resume: return "resume";
    case CkptAction::Restart: return "restart";
    case CkptAction::RestartMigrateStream: return "restart_migrate";
    case CkptAction::RestartConsolidate: return "restart_consolidate";
  }
  return "?";
}

struct CkptPlan {
  std::uint64_t at_iteration = 0;
  CkptAction action = CkptAction::Resume;
  std::uint32_t consolidate_to = 1;
};

struct RunConfig {
  WorkloadSpec spec;
  std::size_t nodes = 2;
  std::uint32_t procs_per_node = 1;  // simulated endpoints packed per host slot
  FabricMode transport = FabricMode::InProcess;
  Tick delivery_delay = 2;
  Tick completion_skew = 0;
  PluginConfig plugin;
  EngineConfig engine;
  std::string ckpt_dir;  // empty: images stay in memory
  bool compress = true;
  std::optional<CkptPlan> plan;
  // restart id exchange through an external TCP coordinator instead of the
  // in-process core ("host:port")
  std::string coordinator_endpoint;
  // observation hook, invoked at the post-drain quiesce point
  std::function<void(const std::vector<CrPlugin*>&, const VerbsEngine&)> on_quiesced;
};

struct RunReport {
  std::vector<std::string> digests;  // per node, hex
  std::vector<std::vector<TranscriptEvent>> events;  // per node, same order as digests
  std::string outcome = "ERROR";     // MATCH | MISMATCH | ERROR
  std::string error;
  Tick ckpt_time_ticks = 0;
  Tick restart_time_ticks = 0;
  std::vector<std::uint64_t> drained_event_counts;
  std::vector<std::uint64_t> image_sizes;
  std::vector<std::string> image_paths;
  std::uint64_t total_payload_bytes = 0;
  std::uint64_t in_flight_at_ckpt = 0;
  std::uint64_t wqes_outstanding_at_ckpt = 0;
  std::uint64_t reposted_wqes = 0;
  std::size_t drain_rounds = 0;
  bool drain_hazard = false;
  bool checkpoint_fired = false;
};

namespace runmeta {

// Images are self-describing: the workload-state section starts with the run
// parameters so a restart can rebuild the world from files alone.
inline Bytes encode(const RunConfig& cfg) {
  Bytes b;
  b.push_back(static_cast<std::uint8_t>(cfg.spec.kind));
  store_le64(b, cfg.spec.iterations);
  store_le32(b, cfg.spec.msg_size);
  store_le32(b, cfg.spec.imm_every);
  store_le32(b, cfg.spec.signaled_every);
  store_le64(b, cfg.spec.seed);
  store_le32(b, std::uint32_t(cfg.nodes));
  store_le32(b, cfg.procs_per_node);
  store_le64(b, cfg.delivery_delay);
  store_le64(b, cfg.completion_skew);
  b.push_back(static_cast<std::uint8_t>(cfg.plugin.id_policy));
  store_le64(b, cfg.plugin.drain_interval_ticks);
  store_le64(b, cfg.plugin.drain_max_rounds);
  b.push_back(cfg.plugin.capture_inline_payloads ? 1 : 0);
  store_le32(b, cfg.engine.qp_num_base);
  store_le32(b, std::uint32_t(cfg.engine.qp_epoch_stride));
  store_le32(b, cfg.engine.rkey_base);
  store_le32(b, std::uint32_t(cfg.engine.rkey_epoch_stride));
  store_le32(b, cfg.engine.lkey_base);
  store_le32(b, std::uint32_t(cfg.engine.lkey_epoch_stride));
  store_le16(b, cfg.engine.lid_base);
  store_le32(b, std::uint32_t(cfg.engine.lid_epoch_stride));
  store_le64(b, cfg.engine.node_mem_bytes);
  return b;
}

inline RunConfig decode(ByteReader& r) {
  RunConfig cfg;
  cfg.spec.kind = static_cast<WorkloadKind>(r.u8());
  cfg.spec.iterations = r.u64le();
  cfg.spec.msg_size = r.u32le();
  cfg.spec.imm_every = r.u32le();
  cfg.spec.signaled_every = r.u32le();
  cfg.spec.seed = r.u64le();
  cfg.nodes = r.u32le();
  cfg.procs_per_node = r.u32le();
  cfg.delivery_delay = r.u64le();
  cfg.completion_skew = r.u64le();
  cfg.plugin.id_policy = static_cast<IdPolicy>(r.u8());
  cfg.plugin.drain_interval_ticks = r.u64le();
  cfg.plugin.drain_max_rounds = r.u64le();
  cfg.plugin.capture_inline_payloads = r.u8() != 0;
  cfg.engine.qp_num_base = r.u32le();
  cfg.engine.qp_epoch_stride = std::int32_t(r.u32le());
  cfg.engine.rkey_base = r.u32le();
  cfg.engine.rkey_epoch_stride = std::int32_t(r.u32le());
  cfg.engine.lkey_base = r.u32le();
  cfg.engine.lkey_epoch_stride = std::int32_t(r.u32le());
  cfg.engine.lid_base = r.u16le();
  cfg.engine.lid_epoch_stride = std::int32_t(r.u32le());
  cfg.engine.node_mem_bytes = r.u64le();
  return cfg;
}

}  // namespace runmeta

// Orchestrates one run: fabric + engine + plugins + apps under a cooperative
// round-robin scheduler, with an optional coordinator-driven checkpoint at an
// application iteration boundary on node 0 (the other nodes are parked
// wherever they happen to be, which is what makes mid-protocol quiesce the
// interesting case).
class WorkloadRunner {
public:
  explicit WorkloadRunner(RunConfig cfg) : cfg_(std::move(cfg)) {}

  RunReport run() {
    RunReport report;
    try {
      run_impl(report);
    } catch (const Error& e) {
      report.outcome = "ERROR";
      report.error = e.what();
    }
    return report;
  }

  // Rebuild a run from checkpoint images (the `restart` front door). The
  // meta header of node 0's image supplies the run parameters.
  static RunReport restart_from_images(const std::vector<std::string>& image_paths,
                                       FabricMode transport, std::uint32_t consolidate_to) {
    RunReport report;
    try {
      std::vector<NodeCheckpointState> states;
      for (const auto& p : image_paths) {
        if (!std::filesystem::exists(p)) fail(Errc::ImageMissing, p);
        states.push_back(read_image(p));
      }
      if (states.empty()) fail(Errc::ImageMissing, "no images given");
      ByteReader r(ByteSpan(states[0].workload_state.data(), states[0].workload_state.size()),
                   Errc::CorruptImage);
      RunConfig cfg = runmeta::decode(r);
      if (states.size() != cfg.nodes) fail(Errc::ImageMissing, "image count does not match run");
      cfg.transport = transport;
      WorkloadRunner runner(cfg);
      report.outcome = "RUNNING";
      auto slots = consolidate_to > 0 ? WorkloadRunner::consolidate_map(cfg.nodes, consolidate_to)
                                      : WorkloadRunner::packing_map(cfg.nodes, cfg.procs_per_node);
      runner.build_world(states[0].epoch + 1, transport, std::move(slots));
      runner.restore_from_states(std::move(states));
      runner.main_loop(report);
      if (report.outcome == "ERROR") return report;
      runner.finalize(report);
      report.outcome = "OK";  // caller compares digests against a reference
    } catch (const Error& e) {
      report.outcome = "ERROR";
      report.error = e.what();
    }
    return report;
  }

private:
  static std::map<NodeId, std::uint32_t> consolidate_map(std::size_t nodes, std::uint32_t slots) {
    std::map<NodeId, std::uint32_t> m;
    if (slots == 0) slots = 1;
    for (NodeId n = 0; n < nodes; ++n) m[n] = n % slots;
    return m;
  }

  // Contiguous packing used at launch (and preserved by a plain restart).
  static std::map<NodeId, std::uint32_t> packing_map(std::size_t nodes,
                                                     std::uint32_t procs_per_node) {
    std::map<NodeId, std::uint32_t> m;
    if (procs_per_node > 1)
      for (NodeId n = 0; n < nodes; ++n) m[n] = n / procs_per_node;
    return m;
  }

  void run_impl(RunReport& report) {
    validate_spec(cfg_.spec, cfg_.nodes);
    if (cfg_.plan && cfg_.plan->at_iteration >= cfg_.spec.iterations)
      fail(Errc::SpecError, "ckpt-at must fall inside the run");
    report.outcome = "RUNNING";
    build_world(0, cfg_.transport, packing_map(cfg_.nodes, cfg_.procs_per_node));
    setup_apps();
    main_loop(report);
    if (report.outcome == "ERROR") return;
    finalize(report);
    report.outcome = "OK";
  }

  void build_world(std::uint64_t epoch, FabricMode mode, std::map<NodeId, std::uint32_t> slots) {
    FabricConfig fcfg;
    fcfg.mode = mode;
    fcfg.delivery_delay_ticks = cfg_.delivery_delay;
    fcfg.completion_skew_ticks = cfg_.completion_skew;
    fcfg.rng_seed = cfg_.spec.seed;
    epoch_ = epoch;
    if (!fabric_) fabric_ = std::make_unique<Fabric>(fcfg);
    eng_ = std::make_unique<VerbsEngine>(*fabric_, cfg_.engine, epoch_, std::move(slots));
    plugs_.clear();
    apps_.clear();
    done_.assign(cfg_.nodes, false);
    for (NodeId n = 0; n < cfg_.nodes; ++n) {
      eng_->add_node(n);
      plugs_.push_back(std::make_unique<CrPlugin>(n, *eng_, cfg_.plugin));
    }
  }

  AppContext app_ctx(NodeId n) {
    AppContext ctx;
    ctx.plugin = plugs_[n].get();
    ctx.spec = &cfg_.spec;
    ctx.node = n;
    ctx.nnodes = cfg_.nodes;
    ctx.side_channel = &side_channel_;
    return ctx;
  }

  void setup_apps() {
    for (NodeId n = 0; n < cfg_.nodes; ++n) apps_.push_back(make_app(cfg_.spec, n));
    for (NodeId n = 0; n < cfg_.nodes; ++n) {
      AppContext ctx = app_ctx(n);
      apps_[n]->setup(ctx);
    }
    // out-of-band id exchange: every plugin sees every node's tuples
    std::vector<DirTuple> all;
    for (auto& p : plugs_)
      for (auto& t : p->export_directory_tuples()) all.push_back(t);
    for (auto& p : plugs_) p->import_directory_tuples(all);
    for (NodeId n = 0; n < cfg_.nodes; ++n) {
      AppContext ctx = app_ctx(n);
      apps_[n]->bind_peers(ctx);
    }
  }

  bool all_done() const {
    for (bool d : done_)
      if (!d) return false;
    return true;
  }

  void main_loop(RunReport& report) {
    std::uint64_t sweeps = 0;
    const std::uint64_t sweep_cap = 2'000'000 + cfg_.spec.iterations * 4000;
    while (!all_done()) {
      if (++sweeps > sweep_cap) fail(Errc::SpecError, "workload made no progress: " + stall_info());
      if (cfg_.plan && !fired_ && !done_[0] &&
          apps_[0]->completed_iterations() >= cfg_.plan->at_iteration) {
        fire_checkpoint(report);
        if (report.outcome == "ERROR") return;
        continue;
      }
      sweep();
    }
  }

  std::string stall_info() const {
    std::string s;
    for (NodeId n = 0; n < cfg_.nodes; ++n)
      s += "node" + std::to_string(n) + (done_[n] ? " done " : " iter=") +
           (done_[n] ? "" : std::to_string(apps_[n]->completed_iterations())) + " ";
    EngineSnapshot snap = eng_->snapshot();
    std::size_t queued = 0, events = 0;
    for (const auto& q : snap.qps) queued += q.send_entries.size() + q.recv_entries.size();
    for (const auto& c : snap.cqs) events += c.events.size();
    s += "| queued_wqes=" + std::to_string(queued) + " cq_events=" + std::to_string(events) +
         " pending_acks=" + std::to_string(snap.pending_acks.size()) +
         " in_flight=" + std::to_string(fabric_->in_flight().size());
    return s;
  }

  void sweep() {
    for (NodeId n = 0; n < cfg_.nodes; ++n) {
      if (done_[n]) continue;
      AppContext ctx = app_ctx(n);
      done_[n] = apps_[n]->step(ctx);
      if (done_[n] && cfg_.spec.kind == WorkloadKind::RdmaStream && n == 0)
        if (auto* reader = dynamic_cast<RdmaStreamApp*>(apps_[1].get())) reader->set_peer_done();
    }
    eng_->progress(1);
  }

  void fire_checkpoint(RunReport& report) {
    fired_ = true;
    report.checkpoint_fired = true;

    // the initiating node crosses the boundary: its next step posts the next
    // send, which takes flight before anyone is parked
    AppContext ctx0 = app_ctx(0);
    if (!done_[0]) done_[0] = apps_[0]->step(ctx0);
    eng_->progress(1);

    CoordinatorCore core;
    std::vector<std::uint64_t> client_ids;
    for (NodeId n = 0; n < cfg_.nodes; ++n) client_ids.push_back(core.register_client(n));

    Tick ckpt_begin = fabric_->now();
    std::vector<NodeCheckpointState> states(cfg_.nodes);
    std::vector<CheckpointHooks> hooks;
    bool audited = false;
    for (NodeId n = 0; n < cfg_.nodes; ++n) {
      CheckpointHooks h;
      h.quiesce = [this, n, &report] {
        fabric_->quiesce(n);
        // distinct data frames still flying once this node stops sending
        std::uint64_t flying = 0;
        for (const auto& f : fabric_->in_flight())
          if (f.kind != FrameKind::DeliveryAck) ++flying;
        report.in_flight_at_ckpt = flying;
        return true;
      };
      h.drain_once = [this, n] { return plugs_[n]->drain_once(); };
      h.write_image = [this, n, &states, &report, &audited] {
        if (!audited) {
          audited = true;
          run_quiesced_hook();
        }
        Bytes blob = runmeta::encode(cfg_);
        Bytes app_state = apps_[n]->save();
        blob.insert(blob.end(), app_state.begin(), app_state.end());
        states[n] = plugs_[n]->capture_state(std::move(blob));
        report.wqes_outstanding_at_ckpt += states[n].wqe_log.size();
        if (!cfg_.ckpt_dir.empty()) {
          std::filesystem::create_directories(cfg_.ckpt_dir);
          std::string path = cfg_.ckpt_dir + "/node_" + std::to_string(n) + ".img";
          ImageStats stats = write_image(states[n], path, cfg_.compress);
          report.image_sizes.push_back(stats.bytes_written);
          report.image_paths.push_back(path);
        } else {
          Bytes img = serialize_image(states[n], cfg_.compress);
          report.image_sizes.push_back(img.size());
          states[n] = deserialize_image(ByteSpan(img.data(), img.size()));
        }
        return true;
      };
      h.resume = [this, n] {
        plugs_[n]->on_resume();
        if (cfg_.plan->action == CkptAction::Resume) fabric_->unquiesce(n);
      };
      hooks.push_back(std::move(h));
    }

    DrainPacing pacing;
    pacing.drain_interval_ticks = cfg_.plugin.drain_interval_ticks;
    pacing.max_rounds = cfg_.plugin.drain_max_rounds;
    pacing.advance = [this](Tick t) { eng_->progress(t); };
    CheckpointSummary summary = core.broadcast_checkpoint(client_ids, hooks, pacing);
    report.drain_rounds = summary.drain_rounds;
    for (const auto& r : summary.reports) report.drained_event_counts.push_back(r.events_drained);
    report.ckpt_time_ticks = fabric_->now() - ckpt_begin;

    // a delivered message whose receiver-visible effect was captured while
    // the sender-side completion is still pending would be replayed on
    // restart: report it instead of corrupting
    report.drain_hazard = detect_drain_hazard();

    if (cfg_.plan->action == CkptAction::Resume) return;

    if (report.drain_hazard) {
      report.outcome = "ERROR";
      report.error =
          "drain budget exceeded: a sender-side completion is still pending for a delivered "
          "message; restart would duplicate it";
      return;
    }

    // restart family: the original processes end here
    if (cfg_.ckpt_dir.empty()) {
      // states already round-tripped through the codec above
    } else {
      states.clear();
      for (NodeId n = 0; n < cfg_.nodes; ++n)
        states.push_back(read_image(cfg_.ckpt_dir + "/node_" + std::to_string(n) + ".img"));
    }

    total_payload_bytes_ += eng_->delivered_payload_bytes();
    eng_->teardown_all();
    FabricMode mode = fabric_->config().mode;
    if (cfg_.plan->action == CkptAction::RestartMigrateStream) mode = FabricMode::Stream;
    for (NodeId n = 0; n < cfg_.nodes; ++n) fabric_->teardown_and_rebind(n, mode);
    std::map<NodeId, std::uint32_t> slots = packing_map(cfg_.nodes, cfg_.procs_per_node);
    if (cfg_.plan->action == CkptAction::RestartConsolidate)
      slots = consolidate_map(cfg_.nodes, cfg_.plan->consolidate_to);

    Tick restart_begin = fabric_->now();
    build_world(epoch_ + 1, mode, std::move(slots));
    restore_from_states(std::move(states));
    report.restart_time_ticks = fabric_->now() - restart_begin;
    report.reposted_wqes = reposted_;
  }

  void run_quiesced_hook() {
    if (!cfg_.on_quiesced) return;
    std::vector<CrPlugin*> ps;
    for (auto& p : plugs_) ps.push_back(p.get());
    cfg_.on_quiesced(ps, *eng_);
  }

  bool detect_drain_hazard() const {
    EngineSnapshot snap = eng_->snapshot();
    for (const auto& p : snap.pending_acks) {
      if (p.data_frame_in_flight) continue;  // still in flight: ignored by design
      if (p.opcode == Opcode::Send || p.opcode == Opcode::RdmaWriteImm) return true;
    }
    return false;
  }

  // Restart steps 1-6 against the freshly built world.
  void restore_from_states(std::vector<NodeCheckpointState> states) {
    for (std::size_t i = 0; i < states.size(); ++i) {
      plugs_[i]->restart_recreate(*eng_, states[i]);
      reposted_ += states[i].wqe_log.size();
    }

    if (cfg_.coordinator_endpoint.empty())
      exchange_via_core();
    else
      exchange_via_tcp();
    for (auto& p : plugs_) p->restart_repost();

    rebuild_apps(states);
    for (NodeId n = 0; n < cfg_.nodes; ++n) fabric_->unquiesce(n);
  }

  void exchange_via_core() {
    CoordinatorCore core;
    std::vector<std::uint64_t> ids;
    for (auto& p : plugs_) ids.push_back(core.register_client(p->node()));
    core.open_restart_epoch(plugs_.size());
    for (std::size_t i = 0; i < plugs_.size(); ++i) {
      DirectorySession session;
      session.publish = [&core, id = ids[i]](const std::string& ns, Bytes k, Bytes v) {
        core.publish(id, ns, std::move(k), std::move(v));
      };
      plugs_[i]->restart_publish(session);
      core.barrier_arrive(ids[i]);
    }
    if (!core.barrier_released()) core.abort_barrier();
    DirectorySession sub;
    sub.subscribe = [&core](const std::string& ns) {
      std::vector<std::pair<Bytes, Bytes>> out;
      for (auto& e : core.subscribe(ns)) out.emplace_back(e.key, e.value);
      return out;
    };
    for (auto& p : plugs_) p->restart_rebind(sub);
  }

  // Same exchange, but through a running coordinator service: one client
  // connection per simulated node, arrivals queued before the releases are
  // collected so a single thread can drive the whole barrier.
  void exchange_via_tcp() {
    auto colon = cfg_.coordinator_endpoint.rfind(':');
    if (colon == std::string::npos)
      fail(Errc::AddressUnknown, "coordinator endpoint must be host:port");
    std::string host = cfg_.coordinator_endpoint.substr(0, colon);
    auto port = std::uint16_t(std::stoul(cfg_.coordinator_endpoint.substr(colon + 1)));

    std::vector<std::unique_ptr<TcpCoordinatorClient>> clients;
    for (auto& p : plugs_) {
      clients.push_back(std::make_unique<TcpCoordinatorClient>(host, port));
      clients.back()->register_node(p->node());
    }
    clients[0]->ctrl_restart(std::uint32_t(plugs_.size()));
    for (std::size_t i = 0; i < plugs_.size(); ++i) {
      DirectorySession session;
      session.publish = [&clients, i](const std::string& ns, Bytes k, Bytes v) {
        clients[i]->publish(ns, ByteSpan(k.data(), k.size()), ByteSpan(v.data(), v.size()));
      };
      plugs_[i]->restart_publish(session);
    }
    for (auto& c : clients) c->barrier_send();
    for (auto& c : clients) c->barrier_wait();
    DirectorySession sub;
    sub.subscribe = [&clients](const std::string& ns) {
      std::vector<std::pair<Bytes, Bytes>> out;
      for (auto& e : clients[0]->subscribe(ns)) out.emplace_back(e.key, e.value);
      return out;
    };
    for (auto& p : plugs_) p->restart_rebind(sub);
  }

  void rebuild_apps(const std::vector<NodeCheckpointState>& states) {
    for (std::size_t i = 0; i < states.size(); ++i) {
      apps_.push_back(make_app(cfg_.spec, NodeId(i)));
      AppContext ctx = app_ctx(NodeId(i));
      ByteReader r(ByteSpan(states[i].workload_state.data(), states[i].workload_state.size()),
                   Errc::CorruptImage);
      runmeta::decode(r);  // skip the meta header
      Bytes app_state = r.blob(r.remaining());
      apps_[i]->restore(ctx, ByteSpan(app_state.data(), app_state.size()));
      done_[i] = false;
    }
  }

  void finalize(RunReport& report) {
    for (auto& app : apps_) {
      report.digests.push_back(app->transcript().digest_hex());
      report.events.push_back(app->transcript().events());
    }
    report.total_payload_bytes = total_payload_bytes_ + eng_->delivered_payload_bytes();
  }

  RunConfig cfg_;
  std::unique_ptr<Fabric> fabric_;
  std::unique_ptr<VerbsEngine> eng_;
  std::vector<std::unique_ptr<CrPlugin>> plugs_;
  std::vector<std::unique_ptr<NodeApp>> apps_;
  std::map<NodeId, Bytes> side_channel_;
  std::vector<bool> done_;
  std::uint64_t epoch_ = 0;
  std::uint64_t total_payload_bytes_ = 0;
  std::uint64_t reposted_ = 0;
  bool fired_ = false;
};

inline RunReport run_workload(const RunConfig& cfg) {
  WorkloadRunner runner(cfg);
  return runner.run();
}

// Runs the uninterrupted twin first, then the planned run; MATCH means every
// node's transcript digest is identical.
inline RunReport run_with_reference(const RunConfig& cfg) {
  RunConfig ref_cfg = cfg;
  ref_cfg.plan.reset();
  ref_cfg.ckpt_dir.clear();
  RunReport reference = run_workload(ref_cfg);
  if (reference.outcome == "ERROR") return reference;

  if (!cfg.plan) {
    reference.outcome = "MATCH";
    return reference;
  }
  RunReport actual = run_workload(cfg);
  if (actual.outcome == "ERROR") return actual;
  actual.outcome = actual.digests == reference.digests ? "MATCH" : "MISMATCH";
  return actual;
}

}  // namespace ibcr
