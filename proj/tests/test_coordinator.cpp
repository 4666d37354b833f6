#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <thread>

#include "ibcr/coordinator.hpp"
#include "test_util.hpp"

using namespace ibcr;

TEST_CASE("registration hands out sequential client ids") {
  CoordinatorCore core;
  CHECK(core.register_client(0) == 1);
  CHECK(core.register_client(1) == 2);
}

TEST_CASE("duplicate node registration is rejected") {
  CoordinatorCore core;
  core.register_client(7);
  CHECK(test::thrown_code([&] { core.register_client(7); }) == Errc::DuplicateNode);
}

TEST_CASE("registration closes once a checkpoint begins") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  CheckpointHooks idle;
  idle.quiesce = [] { return true; };
  idle.drain_once = [] { return std::size_t(0); };
  idle.write_image = [] { return true; };
  idle.resume = [] {};
  core.broadcast_checkpoint({c1}, {idle}, {});
  CHECK(test::thrown_code([&] { core.register_client(1); }) == Errc::RegistrationClosed);
}

TEST_CASE("two idle clients checkpoint with zero drained events") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  std::uint64_t c2 = core.register_client(1);
  CheckpointHooks idle;
  idle.quiesce = [] { return true; };
  idle.drain_once = [] { return std::size_t(0); };
  idle.write_image = [] { return true; };
  idle.resume = [] {};
  auto summary = core.broadcast_checkpoint({c1, c2}, {idle, idle}, {});
  REQUIRE(summary.reports.size() == 2);
  CHECK(summary.reports[0].events_drained == 0);
  CHECK(summary.reports[1].events_drained == 0);
  CHECK(summary.drain_rounds == 2);
}

TEST_CASE("a client that never acks quiesce aborts the checkpoint") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  std::uint64_t c2 = core.register_client(1);
  CheckpointHooks good;
  good.quiesce = [] { return true; };
  good.drain_once = [] { return std::size_t(0); };
  good.write_image = [] { return true; };
  good.resume = [] {};
  CheckpointHooks stuck = good;
  stuck.quiesce = [] { return false; };
  CHECK(test::thrown_code([&] { core.broadcast_checkpoint({c1, c2}, {good, stuck}, {}); }) ==
        Errc::CheckpointAborted);
}

TEST_CASE("four busy clients phase through global barriers in order") {
  CoordinatorCore core;
  std::vector<std::uint64_t> ids;
  for (NodeId n = 0; n < 4; ++n) ids.push_back(core.register_client(n));
  // drain twice on one node to prove rounds are global
  std::vector<int> drains_left{2, 0, 1, 0};
  std::vector<CheckpointHooks> hooks;
  for (int i = 0; i < 4; ++i) {
    CheckpointHooks h;
    h.quiesce = [] { return true; };
    h.drain_once = [&drains_left, i] {
      if (drains_left[std::size_t(i)] > 0) {
        --drains_left[std::size_t(i)];
        return std::size_t(3);
      }
      return std::size_t(0);
    };
    h.write_image = [] { return true; };
    h.resume = [] {};
    hooks.push_back(h);
  }
  auto summary = core.broadcast_checkpoint(ids, hooks, {});
  CHECK(summary.drain_rounds == 3);  // rounds 1,2 saw events, round 3 was silent
  CHECK(summary.reports[0].events_drained == 6);
  CHECK(summary.reports[2].events_drained == 3);

  // phase-log audit: all clients reach phase P before any client reaches P+1
  const auto& log = core.phase_log();
  std::map<ClientPhase, std::vector<std::size_t>> positions;
  for (std::size_t i = 0; i < log.size(); ++i) positions[log[i].phase].push_back(i);
  auto max_pos = [&](ClientPhase p) {
    return *std::max_element(positions[p].begin(), positions[p].end());
  };
  auto min_pos = [&](ClientPhase p) {
    return *std::min_element(positions[p].begin(), positions[p].end());
  };
  CHECK(positions[ClientPhase::Quiesced].size() == 4);
  CHECK(max_pos(ClientPhase::Quiesced) < min_pos(ClientPhase::Drained));
  CHECK(max_pos(ClientPhase::Drained) < min_pos(ClientPhase::Written));
  CHECK(max_pos(ClientPhase::Written) < min_pos(ClientPhase::Running));
}

namespace {

Bytes bytes_of(std::initializer_list<int> xs) {
  Bytes b;
  for (int x : xs) b.push_back(std::uint8_t(x));
  return b;
}

}  // namespace

TEST_CASE("publish echoes back through subscribe after the barrier") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  core.open_restart_epoch(1);
  Bytes key = bytes_of({1, 2, 3});
  Bytes value = bytes_of({9, 9});
  core.publish(c1, "vrkey_pd_rkey", key, value);
  core.barrier_arrive(c1);  // N=1: immediate release
  CHECK(core.barrier_released());
  auto entries = core.subscribe("vrkey_pd_rkey");
  REQUIRE(entries.size() == 1);
  CHECK(entries[0].key == key);
  CHECK(entries[0].value == value);
  CHECK(entries[0].publisher == c1);
}

TEST_CASE("equal vrkeys under different pds are distinct keys") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  std::uint64_t c2 = core.register_client(1);
  core.open_restart_epoch(2);
  // key = vrkey || pd_uid: same vrkey, different pd
  Bytes k1, k2;
  store_le64(k1, 0xAB);
  store_le64(k1, (1ull << 32) | 1);
  store_le64(k2, 0xAB);
  store_le64(k2, (2ull << 32) | 1);
  core.publish(c1, "vrkey_pd_rkey", k1, bytes_of({1}));
  core.publish(c2, "vrkey_pd_rkey", k2, bytes_of({2}));
  core.barrier_arrive(c1);
  core.barrier_arrive(c2);
  CHECK(core.subscribe("vrkey_pd_rkey").size() == 2);  // both retained
}

TEST_CASE("same key with a different value is a publish conflict") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  core.open_restart_epoch(1);
  core.publish(c1, "lid", bytes_of({5}), bytes_of({1}));
  core.publish(c1, "lid", bytes_of({5}), bytes_of({1}));  // identical: no-op
  CHECK(test::thrown_code([&] { core.publish(c1, "lid", bytes_of({5}), bytes_of({2})); }) ==
        Errc::PublishConflict);
}

TEST_CASE("namespaces are fixed to the four id classes") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  core.open_restart_epoch(1);
  CHECK(test::thrown_code([&] { core.publish(c1, "rogue_ns", {}, {}); }) ==
        Errc::InvalidNamespace);
  CHECK(test::thrown_code([&] { core.subscribe("nope"); }) == Errc::InvalidNamespace);
}

TEST_CASE("subscribe before the restart barrier is refused") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  core.open_restart_epoch(2);
  core.publish(c1, "lid", bytes_of({1}), bytes_of({1}));
  CHECK(test::thrown_code([&] { core.subscribe("lid"); }) == Errc::BarrierNotReached);
}

TEST_CASE("an absent client aborts the restart barrier") {
  CoordinatorCore core;
  std::uint64_t c1 = core.register_client(0);
  std::uint64_t c2 = core.register_client(1);
  core.register_client(2);  // never arrives
  core.open_restart_epoch(3);
  core.barrier_arrive(c1);
  core.barrier_arrive(c2);
  CHECK_FALSE(core.barrier_released());
  CHECK(test::thrown_code([&] { core.abort_barrier(); }) == Errc::RestartAborted);
}

TEST_CASE("all-present barrier gives every client the same snapshot") {
  CoordinatorCore core;
  std::vector<std::uint64_t> ids;
  for (NodeId n = 0; n < 3; ++n) ids.push_back(core.register_client(n));
  core.open_restart_epoch(3);
  for (std::size_t i = 0; i < 3; ++i) {
    Bytes k, v;
    store_le64(k, i);
    store_le64(v, 100 + i);
    core.publish(ids[i], "qp_real", k, v);
  }
  for (auto id : ids) core.barrier_arrive(id);
  REQUIRE(core.barrier_released());
  auto a = core.subscribe("qp_real");
  auto b = core.subscribe("qp_real");
  CHECK(a == b);
  CHECK(core.snapshot_hash() == core.snapshot_hash());
}

// ---- wire protocol ----

TEST_CASE("publish request bytes match the documented layout") {
  // type 3, client_id u64 LE, ns as u16 length + bytes, key and value as
  // u32 length + bytes; the whole record preceded by a big-endian u32 length.
  Bytes body;
  body.push_back(3);
  store_le64(body, 1);
  store_str16(body, "lid");
  store_blob32(body, bytes_of({0xAA}));
  store_blob32(body, bytes_of({0xBB, 0xCC}));
  Bytes rec = wirecoord::with_length(ByteSpan(body.data(), body.size()));
  Bytes expected = bytes_of({0, 0, 0, 25,                        // BE length
                             3,                                  // PUBLISH
                             1, 0, 0, 0, 0, 0, 0, 0,             // client 1
                             3, 0, 'l', 'i', 'd',                // ns
                             1, 0, 0, 0, 0xAA,                   // key
                             2, 0, 0, 0, 0xBB, 0xCC});           // value
  CHECK(rec == expected);
}

TEST_CASE("tcp coordinator serves register, publish, barrier and subscribe") {
  TcpCoordinatorServer server({.listen_addr = "127.0.0.1",
                               .port = 0,
                               .expected_clients = 3,
                               .timeout_secs = 30});
  std::thread server_thread([&] { server.serve(); });

  std::vector<std::uint64_t> snapshot_hashes(3);
  std::vector<std::thread> clients;
  for (int i = 0; i < 3; ++i) {
    clients.emplace_back([&, i] {
      TcpCoordinatorClient cli("127.0.0.1", server.port());
      cli.register_node(NodeId(i));
      Bytes k, v;
      store_le64(k, std::uint64_t(i));
      store_le64(v, std::uint64_t(1000 + i));
      cli.publish("qp_real", ByteSpan(k.data(), k.size()), ByteSpan(v.data(), v.size()));
      cli.barrier();  // blocks until all three arrive
      auto entries = cli.subscribe("qp_real");
      Bytes buf;
      for (const auto& e : entries) {
        store_blob32(buf, ByteSpan(e.key.data(), e.key.size()));
        store_blob32(buf, ByteSpan(e.value.data(), e.value.size()));
      }
      snapshot_hashes[std::size_t(i)] = fnv1a64(ByteSpan(buf.data(), buf.size()));
    });
  }
  for (auto& t : clients) t.join();
  server.request_stop();
  server_thread.join();

  CHECK(snapshot_hashes[0] == snapshot_hashes[1]);
  CHECK(snapshot_hashes[1] == snapshot_hashes[2]);
  CHECK(server.core().client_count() == 3);
}

TEST_CASE("tcp errors travel back as status codes") {
  TcpCoordinatorServer server({.listen_addr = "127.0.0.1",
                               .port = 0,
                               .expected_clients = 1,
                               .timeout_secs = 30});
  std::thread server_thread([&] { server.serve(); });
  {
    TcpCoordinatorClient cli("127.0.0.1", server.port());
    cli.register_node(4);
    TcpCoordinatorClient dup("127.0.0.1", server.port());
    CHECK(test::thrown_code([&] { dup.register_node(4); }) == Errc::DuplicateNode);
    cli.publish("lid", Bytes{1}, Bytes{1});
    CHECK(test::thrown_code([&] { cli.publish("lid", Bytes{1}, Bytes{2}); }) ==
          Errc::PublishConflict);
    CHECK(test::thrown_code([&] { cli.subscribe("lid"); }) == Errc::BarrierNotReached);
    cli.barrier();
    CHECK(cli.subscribe("lid").size() == 1);
  }
  server.request_stop();
  server_thread.join();
}

TEST_CASE("phase acks and control messages travel the wire") {
  TcpCoordinatorServer server({.listen_addr = "127.0.0.1",
                               .port = 0,
                               .expected_clients = 1,
                               .timeout_secs = 30});
  std::thread server_thread([&] { server.serve(); });
  {
    TcpCoordinatorClient cli("127.0.0.1", server.port());
    cli.register_node(0);
    CHECK(cli.ack_phase(ClientPhase::Quiesced) == ClientPhase::Quiesced);
    CHECK(cli.ack_phase(ClientPhase::Drained) == ClientPhase::Drained);
    cli.ctrl_restart(1);  // reopen the epoch over the wire
    cli.publish("qp_real", Bytes{1}, Bytes{2});
    cli.barrier();
    CHECK(cli.subscribe("qp_real").size() == 1);
  }
  server.request_stop();
  server_thread.join();
  // the phase log recorded the acks in order
  const auto& log = server.core().phase_log();
  REQUIRE(log.size() == 2);
  CHECK(log[0].phase == ClientPhase::Quiesced);
  CHECK(log[1].phase == ClientPhase::Drained);
}

TEST_CASE("tcp barrier times out when a client never arrives") {
  TcpCoordinatorServer server({.listen_addr = "127.0.0.1",
                               .port = 0,
                               .expected_clients = 2,
                               .timeout_secs = 1});
  std::thread server_thread([&] { server.serve(); });
  Errc got = Errc::Ok;
  {
    TcpCoordinatorClient cli("127.0.0.1", server.port());
    cli.register_node(0);
    got = test::thrown_code([&] { cli.barrier(); });
  }
  server.request_stop();
  server_thread.join();
  CHECK(got == Errc::RestartAborted);
  CHECK(server.barrier_timed_out());
}
