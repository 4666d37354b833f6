#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <thread>

#include "audit.hpp"
#include "ibcr/coordinator.hpp"
#include "ibcr/harness.hpp"
#include "test_util.hpp"

using namespace ibcr;

namespace {

RunConfig base_config(WorkloadKind kind, std::uint64_t iters, std::uint32_t msg_size,
                      std::uint64_t seed, std::size_t nodes = 2) {
  RunConfig cfg;
  cfg.spec.kind = kind;
  cfg.spec.iterations = iters;
  cfg.spec.msg_size = msg_size;
  cfg.spec.seed = seed;
  cfg.nodes = nodes;
  cfg.delivery_delay = 2;
  return cfg;
}

}  // namespace

TEST_CASE("identical spec and seed give identical digests") {
  for (auto kind : {WorkloadKind::PingPong, WorkloadKind::RdmaStream, WorkloadKind::RingExchange}) {
    std::size_t nodes = kind == WorkloadKind::RingExchange ? 3 : 2;
    RunConfig cfg = base_config(kind, 12, 128, 777, nodes);
    cfg.spec.signaled_every = 3;
    if (kind == WorkloadKind::RdmaStream) cfg.spec.imm_every = 4;
    RunReport a = run_workload(cfg);
    RunReport b = run_workload(cfg);
    REQUIRE(a.outcome == "OK");
    CHECK(a.digests == b.digests);
    cfg.spec.seed = 778;
    RunReport c = run_workload(cfg);
    CHECK(a.digests != c.digests);
  }
}

TEST_CASE("ping-pong alternates strictly: iteration i completes before i+1 begins") {
  RunConfig cfg = base_config(WorkloadKind::PingPong, 10, 64, 5);
  cfg.plan.reset();
  WorkloadRunner runner(cfg);
  RunReport rep = runner.run();
  REQUIRE(rep.outcome == "OK");
  CHECK(rep.total_payload_bytes == 10 * 2 * 64);
  // node 0's transcript must be recv(pong i), send(ping i), recv(pong i+1)...
  // with the iteration in the low bits of wr_id strictly increasing
  REQUIRE(rep.events[0].size() == 20);
  for (std::size_t i = 0; i < rep.events[0].size(); ++i) {
    const auto& e = rep.events[0][i];
    CHECK((e.wr_id & 0xFFFFFFFF) == i / 2);  // iteration
    bool is_recv = e.opcode == Opcode::Recv;
    CHECK(is_recv == (i % 2 == 0));  // pong observed before the ping completion
  }
}

TEST_CASE("ping-pong transfers iterations x 2 x msg_size bytes") {
  RunConfig cfg = base_config(WorkloadKind::PingPong, 1000, 4096, 42);
  RunReport rep = run_workload(cfg);
  REQUIRE(rep.outcome == "OK");
  CHECK(rep.total_payload_bytes == 1000ull * 2 * 4096);
}

TEST_CASE("one hundred thousand bidirectional 4 KiB iterations move 819.2 MB") {
  RunConfig cfg = base_config(WorkloadKind::PingPong, 100000, 4096, 42);
  cfg.delivery_delay = 1;
  RunReport rep = run_workload(cfg);
  REQUIRE(rep.outcome == "OK");
  CHECK(rep.total_payload_bytes == 819'200'000ull);
}

TEST_CASE("rdma stream produces exactly ceil(iters/k) sender completions") {
  for (std::uint32_t k : {1u, 3u, 4u, 7u}) {
    for (std::uint64_t iters : {5ull, 12ull, 21ull}) {
      RunConfig cfg = base_config(WorkloadKind::RdmaStream, iters, 256, 99);
      cfg.spec.signaled_every = k;
      cfg.spec.imm_every = 0;
      WorkloadRunner runner(cfg);
      RunReport rep = runner.run();
      REQUIRE(rep.outcome == "OK");
      // the writer's transcript holds exactly the signaled completions
      CHECK(rep.events[0].size() == (iters + k - 1) / k);
      for (const auto& e : rep.events[0]) CHECK(e.opcode == Opcode::RdmaWrite);
    }
  }
}

TEST_CASE("ring exchange rotates tokens and conserves their sum") {
  const std::uint64_t nodes = 4, rounds = 5;
  RunConfig cfg = base_config(WorkloadKind::RingExchange, rounds, 64, 3, nodes);
  RunReport rep = run_workload(cfg);
  REQUIRE(rep.outcome == "OK");

  // Independent oracle: rebuild each token from first principles. At round r
  // node j holds the token that started at (j - r) mod n, and the wire bytes
  // are the seeded payload with the value spliced into the first eight
  // bytes. Every recorded recv hash must match the reconstruction.
  auto token_at = [&](std::uint64_t node, std::uint64_t round) {
    std::uint64_t origin = (node + nodes * rounds - round) % nodes;
    return 1000 + 7 * origin;
  };
  std::uint32_t sz = std::max<std::uint32_t>(cfg.spec.msg_size, 8);
  for (std::uint64_t j = 0; j < nodes; ++j) {
    std::uint64_t pred = (j + nodes - 1) % nodes;
    std::size_t recvs_seen = 0;
    for (const auto& e : rep.events[j]) {
      if (e.opcode != Opcode::Recv) continue;
      std::uint64_t r = recvs_seen++;
      Bytes expect = workload_payload(cfg.spec, NodeId(pred), r, sz);
      std::uint64_t value = token_at(pred, r);  // what the predecessor held
      for (int i = 0; i < 8; ++i) expect[std::size_t(i)] = std::uint8_t(value >> (8 * i));
      CHECK(e.payload_hash == fnv1a64(ByteSpan(expect.data(), expect.size())));
    }
    CHECK(recvs_seen == rounds);
  }
  // conservation: the multiset of held values is a pure rotation each round
  std::uint64_t expected_sum = 0, initial_sum = 0;
  for (std::uint64_t j = 0; j < nodes; ++j) {
    expected_sum += token_at(j, rounds);
    initial_sum += 1000 + 7 * j;
  }
  CHECK(expected_sum == initial_sum);
}

TEST_CASE("transcript verification compares digests") {
  Transcript a, b;
  a.append(1, Opcode::Send, 64, 0xAB);
  b.append(1, Opcode::Send, 64, 0xAB);
  CHECK(verify_transcripts(a, a));
  CHECK(verify_transcripts(a, b));
  Transcript c;
  c.append(1, Opcode::Send, 64, 0xAC);  // one payload hash bit flipped
  CHECK_FALSE(verify_transcripts(a, c));
}

TEST_CASE("resume at an iteration boundary preserves the digest") {
  for (auto kind : {WorkloadKind::PingPong, WorkloadKind::RdmaStream, WorkloadKind::RingExchange}) {
    std::size_t nodes = kind == WorkloadKind::RingExchange ? 3 : 2;
    RunConfig cfg = base_config(kind, 10, 128, 1234, nodes);
    cfg.spec.signaled_every = 2;
    if (kind == WorkloadKind::RdmaStream) cfg.spec.imm_every = 3;
    cfg.plan = CkptPlan{5, CkptAction::Resume};
    RunReport rep = run_with_reference(cfg);
    CHECK(rep.outcome == "MATCH");
    CHECK(rep.checkpoint_fired);
  }
}

TEST_CASE("restart reproduces the uninterrupted transcript") {
  for (auto kind : {WorkloadKind::PingPong, WorkloadKind::RingExchange}) {
    std::size_t nodes = kind == WorkloadKind::RingExchange ? 3 : 2;
    RunConfig cfg = base_config(kind, 9, 96, 777, nodes);
    cfg.plan = CkptPlan{4, CkptAction::Restart};
    RunReport rep = run_with_reference(cfg);
    CHECK(rep.outcome == "MATCH");
    CHECK(rep.checkpoint_fired);
  }
}

TEST_CASE("restart with a forced in-flight frame re-posts the logged WQE") {
  RunConfig cfg = base_config(WorkloadKind::PingPong, 8, 64, 4242);
  cfg.delivery_delay = 25;
  cfg.plugin.drain_interval_ticks = 5;
  cfg.plan = CkptPlan{4, CkptAction::Restart};
  RunReport rep = run_with_reference(cfg);
  REQUIRE(rep.outcome == "MATCH");
  CHECK(rep.in_flight_at_ckpt >= 1);
  CHECK(rep.wqes_outstanding_at_ckpt >= 1);
  CHECK(rep.reposted_wqes >= 1);
}

TEST_CASE("migration to the stream transport reproduces the digest") {
  RunConfig cfg = base_config(WorkloadKind::PingPong, 8, 64, 11);
  cfg.plan = CkptPlan{3, CkptAction::RestartMigrateStream};
  RunReport rep = run_with_reference(cfg);
  CHECK(rep.outcome == "MATCH");
}

TEST_CASE("consolidated restart onto one host slot reproduces the digest") {
  RunConfig cfg = base_config(WorkloadKind::RingExchange, 6, 64, 12, 4);
  cfg.plan = CkptPlan{3, CkptAction::RestartConsolidate, 1};
  RunReport rep = run_with_reference(cfg);
  CHECK(rep.outcome == "MATCH");
}

TEST_CASE("the bookkeeping audit holds at the quiesce point") {
  RunConfig cfg = base_config(WorkloadKind::PingPong, 8, 64, 5150);
  cfg.delivery_delay = 25;
  cfg.plugin.drain_interval_ticks = 5;
  cfg.plan = CkptPlan{4, CkptAction::Restart};
  std::size_t audits = 0, violations = 0;
  cfg.on_quiesced = [&](const std::vector<CrPlugin*>& plugs, const VerbsEngine& eng) {
    for (auto* p : plugs) {
      ++audits;
      if (!test::audit_wqe_log(*p, eng)) ++violations;
    }
  };
  RunReport rep = run_with_reference(cfg);
  CHECK(rep.outcome == "MATCH");
  CHECK(audits == 2);
  CHECK(violations == 0);
}

TEST_CASE("globally-unique virtual ids run the full restart pipeline") {
  // Virtual keys differ from real keys from the very first registration, so
  // every send resolves through the directory even before a checkpoint.
  for (auto kind : {WorkloadKind::PingPong, WorkloadKind::RdmaStream}) {
    RunConfig cfg = base_config(kind, 10, 128, 2718);
    cfg.spec.signaled_every = 2;
    if (kind == WorkloadKind::RdmaStream) cfg.spec.imm_every = 3;
    cfg.plugin.id_policy = IdPolicy::GloballyUniqueVirtual;
    cfg.plan = CkptPlan{5, CkptAction::Restart};
    RunReport rep = run_with_reference(cfg);
    CHECK(rep.outcome == "MATCH");
  }
}

TEST_CASE("resume is safe even when an ack outlives the drain budget") {
  // The same configuration refuses a restart (the sender-side completion is
  // still pending for a delivered message), but resume keeps the real queues
  // alive, so the late ack simply arrives afterwards.
  RunConfig cfg = base_config(WorkloadKind::PingPong, 8, 64, 171);
  cfg.completion_skew = 150;  // beyond one default drain interval
  cfg.plan = CkptPlan{4, CkptAction::Restart};
  RunReport restart = run_with_reference(cfg);
  CHECK(restart.outcome == "ERROR");
  CHECK(restart.drain_hazard);

  cfg.plan = CkptPlan{4, CkptAction::Resume};
  RunReport resume = run_with_reference(cfg);
  CHECK(resume.outcome == "MATCH");
}

TEST_CASE("invalid specs are rejected") {
  CHECK(test::thrown_code([] {
          RunConfig cfg = base_config(WorkloadKind::PingPong, 5, 64, 1, 1);
          run_workload(cfg);
        }) == Errc::Ok);  // run_workload catches and reports
  RunConfig cfg = base_config(WorkloadKind::PingPong, 5, 64, 1, 1);
  CHECK(run_workload(cfg).outcome == "ERROR");
  cfg = base_config(WorkloadKind::RingExchange, 5, 64, 1, 2);
  CHECK(run_workload(cfg).outcome == "ERROR");
  cfg = base_config(WorkloadKind::PingPong, 5, 64, 1);
  cfg.plan = CkptPlan{7, CkptAction::Resume};  // beyond the run
  CHECK(run_workload(cfg).outcome == "ERROR");
  CHECK(test::thrown_code([] { validate_spec({WorkloadKind::PingPong, 0, 64}, 2); }) ==
        Errc::SpecError);
  CHECK(test::thrown_code([] { validate_spec({WorkloadKind::PingPong, 1, 0}, 2); }) ==
        Errc::SpecError);
}

TEST_CASE("spec text parses key=value lines") {
  WorkloadSpec spec = parse_spec_text(
      "# comment\nworkload=ring_exchange\niters=17\nmsg_size=512\nimm_every=3\n"
      "signaled_every=4\nseed=99\n");
  CHECK(spec.kind == WorkloadKind::RingExchange);
  CHECK(spec.iterations == 17);
  CHECK(spec.msg_size == 512);
  CHECK(spec.imm_every == 3);
  CHECK(spec.signaled_every == 4);
  CHECK(spec.seed == 99);
  CHECK(test::thrown_code([] { parse_spec_text("workload=warp_drive\n"); }) == Errc::SpecError);
  CHECK(test::thrown_code([] { parse_spec_text("iters=banana\n"); }) == Errc::SpecError);
  CHECK(test::thrown_code([] { parse_spec_text("no_equals_here\n"); }) == Errc::SpecError);
}

TEST_CASE("the restart id exchange can run through a live coordinator service") {
  TcpCoordinatorServer server({.listen_addr = "127.0.0.1",
                               .port = 0,
                               .expected_clients = 2,
                               .timeout_secs = 30});
  std::thread server_thread([&] { server.serve(); });

  RunConfig cfg = base_config(WorkloadKind::PingPong, 10, 64, 606);
  cfg.plan = CkptPlan{5, CkptAction::Restart};
  cfg.coordinator_endpoint = "127.0.0.1:" + std::to_string(server.port());
  RunReport rep = run_with_reference(cfg);
  server.request_stop();
  server_thread.join();

  CHECK(rep.outcome == "MATCH");
  CHECK(server.core().client_count() == 2);
}

TEST_CASE("checkpoint images written to disk can seed a standalone restart") {
  auto dir = std::filesystem::temp_directory_path() / "ibcr_workload_restart";
  std::filesystem::remove_all(dir);
  RunConfig cfg = base_config(WorkloadKind::PingPong, 9, 128, 31337);
  cfg.plan = CkptPlan{4, CkptAction::Resume};
  cfg.ckpt_dir = dir.string();
  RunReport resumed = run_with_reference(cfg);
  REQUIRE(resumed.outcome == "MATCH");
  REQUIRE(resumed.image_paths.size() == 2);

  // a fresh process picks the images up and completes the run
  RunReport restarted = WorkloadRunner::restart_from_images(resumed.image_paths,
                                                            FabricMode::InProcess, 0);
  REQUIRE(restarted.outcome == "OK");
  CHECK(restarted.digests == resumed.digests);

  // missing image
  auto bad = resumed.image_paths;
  bad[1] = (dir / "node_9.img").string();
  RunReport missing = WorkloadRunner::restart_from_images(bad, FabricMode::InProcess, 0);
  CHECK(missing.outcome == "ERROR");
  CHECK(missing.error.find("ImageMissing") != std::string::npos);
}
