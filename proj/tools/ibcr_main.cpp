// ibcr: drive the simulated verbs fabric through workloads, checkpoints,
// restarts and migrations, and report transcripts and statistics.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "ibcr/harness.hpp"
#include "ibcr/stats.hpp"

namespace {

using namespace ibcr;

int outcome_exit_code(const std::string& outcome) {
  if (outcome == "MATCH") return 0;
  if (outcome == "MISMATCH") return 1;
  return 2;
}

void print_report(const RunConfig& cfg, const RunReport& rep) {
  std::cout << "workload=" << workload_name(cfg.spec.kind) << "\n";
  std::cout << "nodes=" << cfg.nodes << "\n";
  std::cout << "iterations=" << cfg.spec.iterations << "\n";
  std::cout << "msg_size=" << cfg.spec.msg_size << "\n";
  std::cout << "seed=" << cfg.spec.seed << "\n";
  std::cout << "transport=" << (cfg.transport == FabricMode::Stream ? "stream" : "sim") << "\n";
  if (cfg.plan) {
    std::cout << "action=" << action_name(cfg.plan->action) << "\n";
    std::cout << "ckpt_at=" << cfg.plan->at_iteration << "\n";
  }
  std::cout << "outcome=" << rep.outcome << "\n";
  if (!rep.error.empty()) std::cout << "error=" << rep.error << "\n";
  std::cout << "checkpoint_fired=" << (rep.checkpoint_fired ? 1 : 0) << "\n";
  std::cout << "ckpt_time_ticks=" << rep.ckpt_time_ticks << "\n";
  std::cout << "restart_time_ticks=" << rep.restart_time_ticks << "\n";
  std::cout << "drain_rounds=" << rep.drain_rounds << "\n";
  std::cout << "drain_hazard=" << (rep.drain_hazard ? 1 : 0) << "\n";
  std::cout << "in_flight_at_ckpt=" << rep.in_flight_at_ckpt << "\n";
  std::cout << "wqes_outstanding_at_ckpt=" << rep.wqes_outstanding_at_ckpt << "\n";
  std::cout << "reposted_wqes=" << rep.reposted_wqes << "\n";
  std::cout << "total_payload_bytes=" << rep.total_payload_bytes << "\n";
  for (std::size_t i = 0; i < rep.drained_event_counts.size(); ++i)
    std::cout << "drained_events_node" << i << "=" << rep.drained_event_counts[i] << "\n";
  for (std::size_t i = 0; i < rep.image_sizes.size(); ++i)
    std::cout << "image_bytes_node" << i << "=" << rep.image_sizes[i] << "\n";
  for (std::size_t i = 0; i < rep.digests.size(); ++i)
    std::cout << "digest_node" << i << "=" << rep.digests[i] << "\n";
}

struct RunArgs {
  std::string workload = "ping_pong";
  std::string spec_file;
  std::size_t nodes = 2;
  std::uint32_t procs_per_node = 1;
  std::uint64_t iters = 100;
  std::uint32_t msg_size = 4096;
  std::uint32_t imm_every = 0;
  std::uint32_t signaled_every = 1;
  std::uint64_t seed = 42;
  std::int64_t ckpt_at = -1;
  std::string action = "resume";
  std::uint32_t consolidate = 1;
  std::string ckpt_dir;
  bool no_compress = false;
  std::uint64_t drain_interval_ticks = 100;
  std::uint64_t drain_max_rounds = 16;
  bool no_capture_inline = false;
  std::string id_policy = "real_equals_virtual";
  std::string transport = "sim";
  std::string coordinator;
  std::uint64_t delivery_delay = 2;
  std::uint64_t completion_skew = 0;
};

RunConfig to_config(const RunArgs& a) {
  RunConfig cfg;
  if (!a.spec_file.empty()) {
    std::ifstream in(a.spec_file);
    if (!in) fail(Errc::SpecError, "cannot read spec file " + a.spec_file);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    cfg.spec = parse_spec_text(text);
  } else {
    cfg.spec.kind = parse_workload_kind(a.workload);
    cfg.spec.iterations = a.iters;
    cfg.spec.msg_size = a.msg_size;
    cfg.spec.imm_every = a.imm_every;
    cfg.spec.signaled_every = a.signaled_every;
    cfg.spec.seed = a.seed;
  }
  if (const char* env = std::getenv("IBCR_SEED")) cfg.spec.seed = std::stoull(env);
  cfg.nodes = a.nodes;
  cfg.procs_per_node = a.procs_per_node;
  cfg.delivery_delay = a.delivery_delay;
  cfg.completion_skew = a.completion_skew;
  cfg.ckpt_dir = a.ckpt_dir;
  cfg.compress = !a.no_compress;
  cfg.coordinator_endpoint = a.coordinator;
  cfg.plugin.drain_interval_ticks = a.drain_interval_ticks;
  cfg.plugin.drain_max_rounds = a.drain_max_rounds;
  cfg.plugin.capture_inline_payloads = !a.no_capture_inline;
  if (a.id_policy == "real_equals_virtual")
    cfg.plugin.id_policy = IdPolicy::RealEqualsVirtualAtCreate;
  else if (a.id_policy == "globally_unique")
    cfg.plugin.id_policy = IdPolicy::GloballyUniqueVirtual;
  else
    fail(Errc::SpecError, "id-policy must be real_equals_virtual or globally_unique");
  if (a.transport == "sim")
    cfg.transport = FabricMode::InProcess;
  else if (a.transport == "stream")
    cfg.transport = FabricMode::Stream;
  else
    fail(Errc::SpecError, "transport must be sim or stream");
  if (a.ckpt_at >= 0) {
    CkptPlan plan;
    plan.at_iteration = std::uint64_t(a.ckpt_at);
    plan.consolidate_to = a.consolidate;
    if (a.action == "resume") plan.action = CkptAction::Resume;
    else if (a.action == "restart") plan.action = CkptAction::Restart;
    else if (a.action == "restart_migrate") plan.action = CkptAction::RestartMigrateStream;
    else if (a.action == "restart_consolidate") plan.action = CkptAction::RestartConsolidate;
    else fail(Errc::SpecError, "unknown action '" + a.action + "'");
    cfg.plan = plan;
  }
  return cfg;
}

int cmd_run(const RunArgs& args) {
  RunConfig cfg = to_config(args);
  RunReport rep = run_with_reference(cfg);
  print_report(cfg, rep);
  return outcome_exit_code(rep.outcome);
}

int cmd_restart(const std::string& image_dir, const std::string& transport,
                std::uint32_t consolidate, const std::string& coordinator) {
  FabricMode mode;
  if (transport == "sim") mode = FabricMode::InProcess;
  else if (transport == "stream") mode = FabricMode::Stream;
  else fail(Errc::SpecError, "transport must be sim or stream");

  std::vector<std::string> paths;
  for (std::size_t n = 0;; ++n) {
    std::string p = image_dir + "/node_" + std::to_string(n) + ".img";
    if (!std::filesystem::exists(p)) break;
    paths.push_back(p);
  }
  if (paths.empty()) fail(Errc::ImageMissing, "no node_<i>.img files under " + image_dir);

  // recover the run parameters from node 0's image for the reference run
  NodeCheckpointState st0 = read_image(paths[0]);
  ByteReader r(ByteSpan(st0.workload_state.data(), st0.workload_state.size()),
               Errc::CorruptImage);
  RunConfig meta = runmeta::decode(r);
  if (paths.size() != meta.nodes) fail(Errc::ImageMissing, "expected " +
                                                               std::to_string(meta.nodes) +
                                                               " images, found " +
                                                               std::to_string(paths.size()));
  meta.coordinator_endpoint = coordinator;

  RunConfig ref = meta;
  ref.plan.reset();
  ref.coordinator_endpoint.clear();
  RunReport reference = run_workload(ref);

  RunReport rep = WorkloadRunner::restart_from_images(paths, mode, consolidate);
  if (rep.outcome != "ERROR")
    rep.outcome = rep.digests == reference.digests ? "MATCH" : "MISMATCH";
  print_report(meta, rep);
  return outcome_exit_code(rep.outcome);
}

int cmd_overhead(double t1, double o1, double t2, double o2) {
  OverheadFit fit = derive_overhead(t1, o1, t2, o2);
  std::cout << "startup_overhead_s=" << fit.startup_seconds << "\n";
  std::cout << "runtime_overhead_ratio=" << fit.runtime_ratio << "\n";
  std::cout << "runtime_overhead_pct=" << fit.runtime_ratio * 100.0 << "\n";
  return 0;
}

int cmd_coordinator(const std::string& listen, std::size_t expect, int timeout_secs) {
  auto colon = listen.rfind(':');
  if (colon == std::string::npos) fail(Errc::AddressUnknown, "--listen expects addr:port");
  TcpCoordinatorServer::Options opt;
  opt.listen_addr = listen.substr(0, colon);
  opt.port = std::uint16_t(std::stoul(listen.substr(colon + 1)));
  opt.expected_clients = expect;
  opt.timeout_secs = timeout_secs;
  TcpCoordinatorServer server(opt);
  std::cout << "listening=" << opt.listen_addr << ":" << server.port() << "\n"
            << std::flush;
  server.serve();
  return server.barrier_timed_out() ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"simulated RDMA verbs fabric with transparent checkpoint-restart"};
  app.require_subcommand(1);

  RunArgs run_args;
  CLI::App* run = app.add_subcommand("run", "run a workload, optionally checkpointing mid-flight");
  run->add_option("--workload", run_args.workload, "ping_pong | rdma_stream | ring_exchange");
  run->add_option("--spec-file", run_args.spec_file, "key=value workload spec file");
  run->add_option("--nodes", run_args.nodes, "simulated node count");
  run->add_option("--procs-per-node", run_args.procs_per_node, "endpoints packed per host slot");
  run->add_option("--iters", run_args.iters, "iterations");
  run->add_option("--msg-size", run_args.msg_size, "message bytes");
  run->add_option("--imm-every", run_args.imm_every, "WRITE_WITH_IMM cadence (rdma_stream)");
  run->add_option("--signaled-every", run_args.signaled_every, "signaled completion cadence");
  run->add_option("--seed", run_args.seed, "run seed (IBCR_SEED overrides)");
  run->add_option("--ckpt-at", run_args.ckpt_at, "checkpoint at this iteration boundary");
  run->add_option("--action", run_args.action,
                  "resume | restart | restart_migrate | restart_consolidate");
  run->add_option("--consolidate", run_args.consolidate, "host slots for restart_consolidate");
  run->add_option("--ckpt-dir", run_args.ckpt_dir, "directory for checkpoint images");
  run->add_flag("--no-compress", run_args.no_compress, "disable per-section deflate");
  run->add_option("--drain-interval-ticks", run_args.drain_interval_ticks);
  run->add_option("--drain-max-rounds", run_args.drain_max_rounds);
  run->add_flag("--no-capture-inline-payloads", run_args.no_capture_inline,
                "do not copy inline payloads into the WQE log at post time");
  run->add_option("--id-policy", run_args.id_policy, "real_equals_virtual | globally_unique");
  run->add_option("--transport", run_args.transport, "sim | stream");
  run->add_option("--coordinator", run_args.coordinator, "external coordinator addr:port");
  run->add_option("--delivery-delay-ticks", run_args.delivery_delay);
  run->add_option("--completion-skew-ticks", run_args.completion_skew);

  std::string restart_dir, restart_transport = "sim", restart_coordinator;
  std::uint32_t restart_consolidate = 0;
  CLI::App* restart = app.add_subcommand("restart", "restart a checkpointed run from images");
  restart->add_option("image_dir", restart_dir, "directory holding node_<i>.img")->required();
  restart->add_option("--transport", restart_transport, "sim | stream");
  restart->add_option("--consolidate", restart_consolidate, "host slots to restart onto");
  restart->add_option("--coordinator", restart_coordinator, "external coordinator addr:port");

  double t1 = 0, o1 = 0, t2 = 0, o2 = 0;
  CLI::App* overhead =
      app.add_subcommand("overhead", "decompose total overhead into startup + runtime ratio");
  overhead->add_option("--t1", t1, "native runtime 1 (s)")->required();
  overhead->add_option("--o1", o1, "total overhead 1 (s)")->required();
  overhead->add_option("--t2", t2, "native runtime 2 (s)")->required();
  overhead->add_option("--o2", o2, "total overhead 2 (s)")->required();

  std::string listen = "127.0.0.1:0";
  std::size_t expect = 0;
  int timeout_secs = 30;
  CLI::App* coordinator = app.add_subcommand("coordinator", "run the coordinator service");
  coordinator->add_option("--listen", listen, "addr:port (port 0 picks one)");
  coordinator->add_option("--expect", expect, "clients expected at the restart barrier");
  coordinator->add_option("--timeout-secs", timeout_secs, "barrier timeout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_args);
    if (*restart)
      return cmd_restart(restart_dir, restart_transport, restart_consolidate, restart_coordinator);
    if (*overhead) return cmd_overhead(t1, o1, t2, o2);
    if (*coordinator) return cmd_coordinator(listen, expect, timeout_secs);
  } catch (const ibcr::Error& e) {
    std::cout << "outcome=ERROR\nerror=" << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cout << "outcome=ERROR\nerror=" << e.what() << "\n";
    return 2;
  }
  return 2;
}
