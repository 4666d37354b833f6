#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <memory>

#include "audit.hpp"
#include "world_fixture.hpp"
#include "ibcr/coordinator.hpp"
#include "ibcr/image.hpp"
#include "ibcr/plugin.hpp"
#include "test_util.hpp"

using namespace ibcr;

namespace {

using ibcr::test::Endpoint;
using ibcr::test::PWorld;
using ibcr::test::kBuf;

}  // namespace

TEST_CASE("default policy: virtual ids equal real ids before any checkpoint") {
  PWorld w(2, 0, 0);
  Endpoint e = w.make_endpoint(0);
  auto snap = w.eng->snapshot();
  REQUIRE(snap.qps.size() == 1);
  CHECK(e.vqp == snap.qps[0].qp_num);  // virtual == real at creation
  CHECK(e.vrkey == snap.mrs[0].rkey);
  CHECK(e.vlkey == snap.mrs[0].lkey);
  CHECK(w.p(0).vlid(0) == w.eng->lid_of(0, 0));
}

TEST_CASE("globally-unique policy stamps the node prefix on fresh ids") {
  PluginConfig cfg;
  cfg.id_policy = IdPolicy::GloballyUniqueVirtual;
  PWorld w(3, 0, 0, cfg);
  Endpoint e = w.make_endpoint(2);
  CHECK((e.vrkey >> 24) == 2);
  auto snap = w.eng->snapshot();
  CHECK(e.vrkey != snap.mrs[0].rkey);
  CHECK((e.vqp >> 24) == 3);  // node+1 prefix keeps qp space disjoint from node 0
}

TEST_CASE("every creation appends one resource-log record") {
  PWorld w(1, 0, 0);
  CrPlugin& p = w.p(0);
  std::uint64_t vctx = p.open_device(0);
  std::size_t before = p.creation_log().size();
  p.create_cq(vctx, 16);
  CHECK(p.creation_log().size() == before + 1);
}

TEST_CASE("engine errors propagate unchanged through the wrappers") {
  PWorld w(1, 0, 0);
  CrPlugin& p = w.p(0);
  std::uint64_t vctx = p.open_device(0);
  std::uint64_t vpd = p.alloc_pd(vctx);
  CHECK(test::thrown_code([&] { p.reg_mr(vpd, kBuf, 0, 0); }) == Errc::InvalidRange);
  CHECK(test::thrown_code([&] { p.create_cq(999999, 8); }) == Errc::StaleHandle);
  // nothing half-recorded: the failed calls left no creation records behind
  CHECK(p.creation_log().size() == 2);
}

TEST_CASE("pre-checkpoint TO_RTR passes identity ids through to the engine") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  CHECK(w.eng->qp_state(a.vqp) == QpState::Rts);  // identity: vqp is the real id
  CHECK(w.eng->qp_conn(a.vqp).has_value());
  CHECK(w.p(0).modify_log().size() == 3);
}

TEST_CASE("unresolvable remote virtual ids are reported") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  w.make_endpoint(1);
  // no exchange: directory is empty
  w.p(0).modify_qp(a.vqp, CrPlugin::VirtTransition::to_init());
  CHECK(test::thrown_code([&] {
          w.p(0).modify_qp(a.vqp, CrPlugin::VirtTransition::to_rtr(999, 12345));
        }) == Errc::UnknownRemoteVirtualId);
}

TEST_CASE("illegal transitions propagate and are not recorded") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  std::size_t before = w.p(0).modify_log().size();
  CHECK(test::thrown_code([&] { w.p(0).modify_qp(a.vqp, CrPlugin::VirtTransition::to_rts()); }) ==
        Errc::InvalidTransition);
  CHECK(w.p(0).modify_log().size() == before);
}

TEST_CASE("posted sends are logged, resolved through the directory, and pruned on poll") {
  PWorld w(2, 1, 0);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);

  Bytes payload(256);
  fill_pseudo_random(payload.data(), payload.size(), 5);
  w.eng->mem_write(0, kBuf, ByteSpan(payload.data(), payload.size()));
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 500, 256));
  w.p(0).post_send(a.vqp, w.send_wr(a, 100, 256));
  CHECK(w.p(0).wqe_log().size() == 1);
  CHECK(w.p(1).wqe_log().size() == 1);

  w.eng->progress(4);
  auto rx = w.p(1).poll_cq(b.rcq, 8);
  REQUIRE(rx.size() == 1);
  CHECK(rx[0].wr_id == 500);
  CHECK(rx[0].qp_num == b.vqp);  // virtual id in the event
  CHECK(w.p(1).wqe_log().empty());
  CHECK(w.eng->mem_read(1, kBuf, 256) == payload);

  auto tx = w.p(0).poll_cq(a.scq, 8);
  REQUIRE(tx.size() == 1);
  CHECK(tx[0].qp_num == a.vqp);
  CHECK(w.p(0).wqe_log().empty());
}

TEST_CASE("colliding vrkeys under different pds write into the right nodes") {
  PWorld w(3, 0, 0);
  Endpoint w0a = w.make_endpoint(0);
  Endpoint e1 = w.make_endpoint(1);
  Endpoint e2 = w.make_endpoint(2);
  // second qp on node 0 toward node 2, same pd/cqs as w0a
  std::uint32_t vqp0b = w.p(0).create_qp(w0a.vpd, w0a.scq, w0a.rcq);
  w.exchange();
  w.connect(0, w0a, 1, e1);
  Endpoint tmp = w0a;
  tmp.vqp = vqp0b;
  w.connect(0, tmp, 2, e2);

  REQUIRE(e1.vrkey == e2.vrkey);  // first registration in each pd: forced collision
  REQUIRE(w.p(1).pd_uid_of(e1.vpd) != w.p(2).pd_uid_of(e2.vpd));

  Bytes pay1(64, 0x11), pay2(64, 0x22);
  w.eng->mem_write(0, kBuf, ByteSpan(pay1.data(), pay1.size()));
  w.eng->mem_write(0, kBuf + 64, ByteSpan(pay2.data(), pay2.size()));

  WorkRequest wr1;
  wr1.wr_id = 1;
  wr1.opcode = Opcode::RdmaWrite;
  wr1.sg_list = {{kBuf, 64, w0a.vlkey}};
  wr1.remote_addr = kBuf + 256;
  wr1.rkey = e1.vrkey;
  w.p(0).post_send(w0a.vqp, wr1);

  WorkRequest wr2 = wr1;
  wr2.wr_id = 2;
  wr2.sg_list = {{kBuf + 64, 64, w0a.vlkey}};
  wr2.rkey = e2.vrkey;  // same numeric vrkey, different remote pd via the other qp
  w.p(0).post_send(vqp0b, wr2);

  w.eng->progress(4);
  CHECK(w.eng->mem_read(1, kBuf + 256, 64) == pay1);
  CHECK(w.eng->mem_read(2, kBuf + 256, 64) == pay2);
}

TEST_CASE("recv log entries survive until their completion is seen") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 7, 64));
  CHECK(w.p(1).wqe_log().size() == 1);
  w.p(0).post_send(a.vqp, w.send_wr(a, 8, 64));
  w.eng->progress(3);
  // consumed by the engine but not yet polled: still logged
  CHECK(w.p(1).wqe_log().size() == 1);
  w.p(1).poll_cq(b.rcq, 4);
  CHECK(w.p(1).wqe_log().empty());
}

TEST_CASE("poll serves the refilled private queue before any real event") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  // two completions drained into the private queue
  for (std::uint64_t i = 0; i < 2; ++i) {
    w.p(1).post_recv(b.vqp, w.recv_wr(b, 600 + i, 64));
    w.p(0).post_send(a.vqp, w.send_wr(a, 60 + i, 64));
  }
  w.eng->progress(3);
  w.quiesce_all();
  CHECK(w.drain_all() == 4);  // 2 receiver + 2 sender completions
  CHECK(w.p(1).private_queue_depth(b.rcq) == 2);

  // resume and generate one more real event
  w.fabric->unquiesce(0);
  w.fabric->unquiesce(1);
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 602, 64));
  w.p(0).post_send(a.vqp, w.send_wr(a, 62, 64));
  w.eng->progress(3);

  auto first = w.p(1).poll_cq(b.rcq, 5);
  REQUIRE(first.size() == 2);  // private only, never mixed
  CHECK(first[0].wr_id == 600);
  CHECK(first[1].wr_id == 601);
  auto second = w.p(1).poll_cq(b.rcq, 5);
  REQUIRE(second.size() == 1);
  CHECK(second[0].wr_id == 602);
  // private queue exhausted: behaves as a plain engine poll now
  CHECK(w.p(1).poll_cq(b.rcq, 5).empty());
}

TEST_CASE("a signaled completion covers earlier unsignaled sends") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  for (std::uint64_t i = 0; i < 4; ++i) w.p(1).post_recv(b.vqp, w.recv_wr(b, 700 + i, 64));
  w.p(0).post_send(a.vqp, w.send_wr(a, 70, 64, false));
  w.p(0).post_send(a.vqp, w.send_wr(a, 71, 64, false));
  w.p(0).post_send(a.vqp, w.send_wr(a, 72, 64, false));
  w.p(0).post_send(a.vqp, w.send_wr(a, 73, 64, true));
  w.eng->progress(4);
  CHECK(w.p(0).wqe_log().size() == 4);  // nothing polled yet
  auto evs = w.p(0).poll_cq(a.scq, 8);
  REQUIRE(evs.size() == 1);  // the unsignaled ones never appear
  CHECK(evs[0].wr_id == 73);
  CHECK(w.p(0).wqe_log().empty());  // covered entries pruned with it
}

TEST_CASE("idle checkpoint drains nothing and leaves no bookkeeping") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  w.quiesce_all();
  DrainReport r = w.p(0).on_checkpoint();
  CHECK(r.events_drained == 0);
  CHECK(r.wqes_outstanding == 0);
  CHECK(r.in_flight_ignored == 0);
  CHECK(r.rounds == 2);
}

TEST_CASE("a later drain round captures the skew-delayed sender completion") {
  PluginConfig cfg;
  cfg.drain_interval_ticks = 100;
  PWorld w(2, 1, /*skew=*/30, cfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);

  // first message fully completed: its sender completion sits in the cq
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 1, 64));
  w.p(0).post_send(a.vqp, w.send_wr(a, 10, 64));
  w.eng->progress(40);
  // second message delivered, but its ack is still 30 ticks out
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 2, 64));
  w.p(0).post_send(a.vqp, w.send_wr(a, 11, 64));
  w.eng->progress(2);  // delivery happened; ack in flight

  w.quiesce_all();
  DrainReport r = w.p(0).on_checkpoint();
  CHECK(r.events_drained == 2);  // round 1: first completion; round 2: the late one
  CHECK(r.rounds == 3);          // terminated by the first silent round
  CHECK(r.wqes_outstanding == 0);
  DrainReport r1 = w.p(1).on_checkpoint();  // receiver side drains its recv completions
  CHECK(r1.events_drained == 2);
}

TEST_CASE("in-flight messages are ignored: the WQE stays logged") {
  PluginConfig pcfg;
  pcfg.drain_interval_ticks = 5;  // both drain rounds end before delivery
  PWorld w(2, /*delay=*/50, 0, pcfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 5, 64));
  w.p(0).post_send(a.vqp, w.send_wr(a, 50, 64));
  w.eng->progress(2);  // transmitted, delivery 50 ticks out
  w.quiesce_all();
  DrainReport r = w.p(0).on_checkpoint();
  CHECK(r.events_drained == 0);
  CHECK(r.wqes_outstanding == 1);
  CHECK(r.in_flight_ignored == 1);
  std::string why;
  CHECK(test::audit_wqe_log(w.p(0), *w.eng, &why));
  CHECK(test::audit_wqe_log(w.p(1), *w.eng, &why));
}

TEST_CASE("resume after an idle checkpoint leaves state untouched") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  auto before = w.p(0).shadow_set();
  w.quiesce_all();
  w.p(0).on_checkpoint();
  w.p(1).on_checkpoint();
  w.p(0).on_resume();
  w.p(1).on_resume();
  w.fabric->unquiesce(0);
  w.fabric->unquiesce(1);
  CHECK(w.p(0).shadow_set() == before);

  // traffic still flows
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 9, 32));
  w.p(0).post_send(a.vqp, w.send_wr(a, 90, 32));
  w.eng->progress(3);
  CHECK(w.p(1).poll_cq(b.rcq, 4).size() == 1);
}

TEST_CASE("resume with an in-flight frame delivers it exactly once via real poll") {
  PluginConfig pcfg;
  pcfg.drain_interval_ticks = 2;  // drain ends with the frame still flying
  PWorld w(2, /*delay=*/10, 0, pcfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 5, 64));
  w.p(0).post_send(a.vqp, w.send_wr(a, 50, 64));
  w.eng->progress(2);
  w.quiesce_all();
  w.p(0).on_checkpoint();
  w.p(1).on_checkpoint();
  w.p(0).on_resume();
  w.p(1).on_resume();
  w.fabric->unquiesce(0);
  w.fabric->unquiesce(1);
  w.eng->progress(20);
  auto rx = w.p(1).poll_cq(b.rcq, 8);
  REQUIRE(rx.size() == 1);
  CHECK(rx[0].wr_id == 5);
  CHECK(w.p(1).poll_cq(b.rcq, 8).empty());  // no duplicate
  CHECK(w.p(1).wqe_log().empty());
}

namespace {

// The restart fixture: three messages in three states at checkpoint time
// (fully observed, drained-but-unserved, still in flight), then a full
// teardown and restart on a fresh engine epoch.
struct RestartRun {
  std::vector<std::pair<std::uint64_t, std::uint32_t>> node1_events;  // (wr_id, byte_len)
  std::vector<std::pair<std::uint64_t, std::uint32_t>> node0_events;
  Bytes node1_buf;
  std::vector<ShadowInfo> shadows_before, shadows_after;
  std::uint32_t real_qp_before = 0, real_qp_after = 0;
  std::uint32_t real_rkey_before = 0, real_rkey_after = 0;
  std::uint16_t lid_before = 0, lid_after = 0;
  bool audits_ok = true;
  DrainReport drain0;
};

RestartRun run_restart_scenario(bool do_restart, FabricMode restart_mode = FabricMode::InProcess) {
  RestartRun out;
  PluginConfig pcfg;
  pcfg.drain_interval_ticks = 10;  // well under the delivery delay: message 3
                                   // must still be in flight when drain ends
  PWorld w(2, /*delay=*/50, /*skew=*/0, pcfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);

  auto poll_into = [&](CrPlugin& pl, std::uint64_t vcq, auto& sink) {
    for (const auto& ev : pl.poll_cq(vcq, 16)) sink.emplace_back(ev.wr_id, ev.byte_len);
  };

  Bytes m1(96), m2(128), m3(160);
  fill_pseudo_random(m1.data(), m1.size(), 1);
  fill_pseudo_random(m2.data(), m2.size(), 2);
  fill_pseudo_random(m3.data(), m3.size(), 3);

  // message 1: fully delivered and polled by the application
  w.eng->mem_write(0, kBuf, ByteSpan(m1.data(), m1.size()));
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 501, 96, 0));
  w.p(0).post_send(a.vqp, w.send_wr(a, 101, 96));
  w.eng->progress(60);
  poll_into(w.p(1), b.rcq, out.node1_events);
  poll_into(w.p(0), a.scq, out.node0_events);

  // message 2: delivered, completions posted but never polled (drained)
  w.eng->mem_write(0, kBuf + 96, ByteSpan(m2.data(), m2.size()));
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 502, 128, 96));
  w.p(0).post_send(a.vqp, w.send_wr(a, 102, 128, true, 96));
  w.eng->progress(60);

  // message 3: posted with a recv waiting, but still in flight at quiesce
  w.eng->mem_write(0, kBuf + 224, ByteSpan(m3.data(), m3.size()));
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 503, 160, 224));
  w.p(0).post_send(a.vqp, w.send_wr(a, 103, 160, true, 224));
  w.eng->progress(1);  // transmitted; delivery is 50 ticks out

  w.quiesce_all();
  std::size_t drained = w.drain_all(pcfg.drain_interval_ticks);
  CHECK(drained == 2);  // msg2's receiver + sender completions
  out.drain0.wqes_outstanding = w.p(0).wqe_log().size();
  out.drain0.in_flight_ignored = w.fabric->in_flight_count(0);
  out.audits_ok = test::audit_wqe_log(w.p(0), *w.eng) && test::audit_wqe_log(w.p(1), *w.eng);

  out.shadows_before = w.p(1).shadow_set();
  out.real_qp_before = w.p(1).real_qp_num(b.vqp);
  out.real_rkey_before = w.p(1).real_rkey(b.vrkey);
  out.lid_before = w.p(1).real_lid(w.p(1).vlid(0));

  if (do_restart) {
    auto st0 = w.p(0).capture_state({});
    auto st1 = w.p(1).capture_state({});
    // run the states through the image codec, as the real flow does
    Bytes img0 = serialize_image(st0, true);
    Bytes img1 = serialize_image(st1, true);
    st0 = deserialize_image(ByteSpan(img0.data(), img0.size()));
    st1 = deserialize_image(ByteSpan(img1.data(), img1.size()));
    w.restart({st0, st1}, pcfg, restart_mode);
  } else {
    // plain resume
    w.p(0).on_checkpoint();  // extra drain rounds see nothing new
    w.p(0).on_resume();
    w.p(1).on_resume();
    w.fabric->unquiesce(0);
    w.fabric->unquiesce(1);
  }

  // the application continues: serve completions, let msg3 arrive
  Endpoint a2 = a, b2 = b;  // virtual ids are stable; reuse the handles
  poll_into(w.p(1), b2.rcq, out.node1_events);
  poll_into(w.p(0), a2.scq, out.node0_events);
  w.eng->progress(120);
  poll_into(w.p(1), b2.rcq, out.node1_events);
  poll_into(w.p(0), a2.scq, out.node0_events);

  out.shadows_after = w.p(1).shadow_set();
  out.real_qp_after = w.p(1).real_qp_num(b2.vqp);
  out.real_rkey_after = w.p(1).real_rkey(b2.vrkey);
  out.lid_after = w.p(1).real_lid(w.p(1).vlid(0));
  out.node1_buf = w.eng->mem_read(1, kBuf, 96 + 128 + 160);

  Bytes all;
  all.insert(all.end(), m1.begin(), m1.end());
  all.insert(all.end(), m2.begin(), m2.end());
  all.insert(all.end(), m3.begin(), m3.end());
  CHECK(out.node1_buf == all);
  return out;
}

}  // namespace

TEST_CASE("restart with drained, polled and in-flight messages is exactly-once") {
  RestartRun native = run_restart_scenario(false);
  RestartRun restarted = run_restart_scenario(true);

  CHECK(native.node1_events == restarted.node1_events);
  CHECK(native.node0_events == restarted.node0_events);
  CHECK(native.node1_buf == restarted.node1_buf);
  CHECK(restarted.audits_ok);
  CHECK(restarted.drain0.wqes_outstanding == 1);  // msg3's send entry survives for re-post
  CHECK(restarted.drain0.in_flight_ignored >= 1);

  // virtual ids stable, real ids fresh
  std::vector<std::uint64_t> vids_before, vids_after;
  for (auto& s : restarted.shadows_before) vids_before.push_back(s.virtual_id);
  for (auto& s : restarted.shadows_after) vids_after.push_back(s.virtual_id);
  CHECK(vids_before == vids_after);
  CHECK(restarted.real_qp_before != restarted.real_qp_after);
  CHECK(restarted.real_rkey_before != restarted.real_rkey_after);
  CHECK(restarted.lid_before != restarted.lid_after);
}

TEST_CASE("restart onto a stream transport behaves identically") {
  RestartRun native = run_restart_scenario(false);
  RestartRun migrated = run_restart_scenario(true, FabricMode::Stream);
  CHECK(native.node1_events == migrated.node1_events);
  CHECK(native.node0_events == migrated.node0_events);
  CHECK(native.node1_buf == migrated.node1_buf);
}

TEST_CASE("rdma posts after restart resolve the vrkey to the fresh rkey") {
  PluginConfig pcfg;
  PWorld w(2, 0, 0, pcfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  w.quiesce_all();
  w.drain_all();
  auto st0 = w.p(0).capture_state({});
  auto st1 = w.p(1).capture_state({});
  w.restart({st0, st1}, pcfg);

  std::uint32_t fresh_rkey = w.p(1).real_rkey(b.vrkey);
  CHECK(fresh_rkey != b.vrkey);  // the epoch stride moved the real key space

  Bytes pay(64, 0x3C);
  w.eng->mem_write(0, kBuf, ByteSpan(pay.data(), pay.size()));
  WorkRequest wr;
  wr.wr_id = 77;
  wr.opcode = Opcode::RdmaWrite;
  wr.sg_list = {{kBuf, 64, a.vlkey}};
  wr.remote_addr = kBuf + 512;
  wr.rkey = b.vrkey;  // application still uses the old virtual key
  w.p(0).post_send(a.vqp, wr);
  w.eng->progress(3);
  CHECK(w.eng->mem_read(1, kBuf + 512, 64) == pay);
  auto evs = w.p(0).poll_cq(a.scq, 4);
  REQUIRE(evs.size() == 1);
  CHECK(evs[0].status == WcStatus::Success);
}

TEST_CASE("resources created after restart cannot collide with retained virtual ids") {
  // force the fresh epoch to re-issue real ids that overlap epoch 0's range
  EngineConfig ecfg;
  ecfg.qp_epoch_stride = -1;
  PluginConfig pcfg;
  pcfg.id_policy = IdPolicy::GloballyUniqueVirtual;
  PWorld w(2, 0, 0, pcfg, ecfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  w.quiesce_all();
  w.drain_all();
  auto st0 = w.p(0).capture_state({});
  auto st1 = w.p(1).capture_state({});
  w.restart({st0, st1}, pcfg);

  // a brand-new qp in epoch 1: its real id lands back inside epoch 0's space
  std::uint64_t vctx = w.p(0).open_device(0);
  std::uint64_t vpd = w.p(0).alloc_pd(vctx);
  std::uint64_t cq = w.p(0).create_cq(vctx, 8);
  std::uint32_t nqp = w.p(0).create_qp(vpd, cq, cq);
  const auto& t = w.p(0).translation();
  CHECK(t.vqp_to_qp.size() == 2);  // old and new coexist: no table collision
  CHECK(t.vqp_to_qp.count(nqp) == 1);
  CHECK(nqp != t.vqp_to_qp.at(nqp));  // node-scoped virtual, never the raw real id

  // identity policy switches to node-scoped ids after restart, too
  PWorld w2(1, 0, 0);
  w2.make_endpoint(0);
  w2.quiesce_all();
  auto st = w2.p(0).capture_state({});
  w2.restart({st}, PluginConfig{});
  std::uint64_t vctx2 = w2.p(0).open_device(0);
  CHECK((vctx2 >> 32) == 0);  // node 0 prefix
  CHECK((vctx2 & 0xFFFFFFFF) != 0);
}

TEST_CASE("inline payload capture survives buffer reuse across restart") {
  PluginConfig pcfg;
  pcfg.drain_interval_ticks = 5;
  PWorld w(2, /*delay=*/50, 0, pcfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);

  Bytes original(48, 0x77);
  w.eng->mem_write(0, kBuf, ByteSpan(original.data(), original.size()));
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 9, 48));
  WorkRequest wr = w.send_wr(a, 8, 48);
  wr.inline_data = true;
  w.p(0).post_send(a.vqp, wr);
  // inline semantics: the application may reuse the buffer immediately
  Bytes junk(48, 0xEE);
  w.eng->mem_write(0, kBuf, ByteSpan(junk.data(), junk.size()));

  w.eng->progress(1);  // transmitted, 50 ticks from delivery
  w.quiesce_all();
  w.drain_all(pcfg.drain_interval_ticks);
  auto st0 = w.p(0).capture_state({});
  auto st1 = w.p(1).capture_state({});
  REQUIRE(st0.wqe_log.size() == 1);
  CHECK(st0.wqe_log[0].captured_payload == original);
  w.restart({st0, st1}, pcfg);

  w.eng->progress(60);
  auto rx = w.p(1).poll_cq(b.rcq, 4);
  REQUIRE(rx.size() == 1);
  CHECK(w.eng->mem_read(1, kBuf, 48) == original);  // not the reused bytes
}

TEST_CASE("an RDMA_READ caught mid-flight by a checkpoint completes once after restart") {
  PluginConfig pcfg;
  pcfg.drain_interval_ticks = 5;
  PWorld w(2, /*delay=*/50, 0, pcfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);

  Bytes remote(256);
  fill_pseudo_random(remote.data(), remote.size(), 404);
  w.eng->mem_write(1, kBuf + 1024, ByteSpan(remote.data(), remote.size()));

  WorkRequest wr;
  wr.wr_id = 88;
  wr.opcode = Opcode::RdmaRead;
  wr.sg_list = {{kBuf, 256, a.vlkey}};
  wr.remote_addr = kBuf + 1024;
  wr.rkey = b.vrkey;
  w.p(0).post_send(a.vqp, wr);
  w.eng->progress(1);  // request in flight

  w.quiesce_all();
  CHECK(w.drain_all(pcfg.drain_interval_ticks) == 0);
  auto st0 = w.p(0).capture_state({});
  auto st1 = w.p(1).capture_state({});
  CHECK(st0.wqe_log.size() == 1);
  w.restart({st0, st1}, pcfg);

  w.eng->progress(120);
  auto evs = w.p(0).poll_cq(a.scq, 4);
  REQUIRE(evs.size() == 1);
  CHECK(evs[0].wr_id == 88);
  CHECK(evs[0].byte_len == 256);
  CHECK(w.eng->mem_read(0, kBuf, 256) == remote);
  CHECK(w.p(0).poll_cq(a.scq, 4).empty());
  CHECK(w.p(0).wqe_log().empty());
}

TEST_CASE("a delivered write whose ack died with the fabric replays idempotently") {
  PluginConfig pcfg;
  pcfg.drain_interval_ticks = 5;
  PWorld w(2, /*delay=*/2, /*skew=*/200, pcfg);  // ack far beyond the drain budget
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);

  Bytes payload(128, 0x42);
  w.eng->mem_write(0, kBuf, ByteSpan(payload.data(), payload.size()));
  WorkRequest wr;
  wr.wr_id = 55;
  wr.opcode = Opcode::RdmaWrite;
  wr.sg_list = {{kBuf, 128, a.vlkey}};
  wr.remote_addr = kBuf + 512;
  wr.rkey = b.vrkey;
  w.p(0).post_send(a.vqp, wr);
  w.eng->progress(4);  // delivered; ack 200 ticks out
  CHECK(w.eng->mem_read(1, kBuf + 512, 128) == payload);

  w.quiesce_all();
  CHECK(w.drain_all(pcfg.drain_interval_ticks) == 0);
  auto st0 = w.p(0).capture_state({});
  auto st1 = w.p(1).capture_state({});
  CHECK(st0.wqe_log.size() == 1);  // no completion ever arrived
  w.restart({st0, st1}, pcfg);

  w.eng->progress(250);
  CHECK(w.eng->mem_read(1, kBuf + 512, 128) == payload);  // same bytes, same place
  auto evs = w.p(0).poll_cq(a.scq, 4);
  REQUIRE(evs.size() == 1);  // exactly one completion from the replay
  CHECK(evs[0].wr_id == 55);
  CHECK(w.p(0).poll_cq(a.scq, 4).empty());
}

TEST_CASE("srq entries survive a checkpoint and feed re-posted senders in order") {
  PluginConfig pcfg;
  pcfg.drain_interval_ticks = 5;
  PWorld w(2, /*delay=*/30, 0, pcfg);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  std::uint64_t vsrq = w.p(1).create_srq(b.vpd, 16);
  std::uint64_t srq_cq = w.p(1).create_cq(b.vctx, 32);
  std::uint32_t srq_qp = w.p(1).create_qp(b.vpd, b.scq, srq_cq, vsrq);
  std::uint32_t tx_qp = w.p(0).create_qp(a.vpd, a.scq, a.rcq);
  w.exchange();
  w.connect(0, a, 1, b);
  Endpoint ta = a;
  ta.vqp = tx_qp;
  Endpoint tb = b;
  tb.vqp = srq_qp;
  w.connect(0, ta, 1, tb);

  for (std::uint64_t i = 0; i < 3; ++i) {
    WorkRequest r;
    r.wr_id = 700 + i;
    r.opcode = Opcode::Recv;
    r.sg_list = {{kBuf + i * 64, 64, b.vlkey}};
    w.p(1).post_srq_recv(vsrq, r);
  }
  CHECK(w.p(1).wqe_log().size() == 3);

  // one message in flight at quiesce, two sent after restart
  w.p(0).post_send(tx_qp, w.send_wr(a, 900, 64));
  w.eng->progress(1);
  w.quiesce_all();
  w.drain_all(pcfg.drain_interval_ticks);
  auto st0 = w.p(0).capture_state({});
  auto st1 = w.p(1).capture_state({});
  CHECK(st1.wqe_log.size() == 3);  // all srq entries still logged
  w.restart({st0, st1}, pcfg);

  w.p(0).post_send(tx_qp, w.send_wr(a, 901, 64));
  w.p(0).post_send(tx_qp, w.send_wr(a, 902, 64));
  w.eng->progress(80);
  auto evs = w.p(1).poll_cq(srq_cq, 8);
  REQUIRE(evs.size() == 3);
  CHECK(evs[0].wr_id == 700);  // strict FIFO across the restart
  CHECK(evs[1].wr_id == 701);
  CHECK(evs[2].wr_id == 702);
  CHECK(evs[0].qp_num == srq_qp);  // virtual id in the event
  CHECK(w.p(1).wqe_log().empty());
}

TEST_CASE("captured state round-trips unconsumed recvs into the image") {
  PWorld w(2, 0, 0);
  Endpoint a = w.make_endpoint(0);
  Endpoint b = w.make_endpoint(1);
  w.exchange();
  w.connect(0, a, 1, b);
  w.p(1).post_recv(b.vqp, w.recv_wr(b, 42, 64));
  w.quiesce_all();
  w.drain_all();
  auto st = w.p(1).capture_state({1, 2, 3});
  REQUIRE(st.wqe_log.size() == 1);
  CHECK(st.wqe_log[0].queue == WqeQueueKind::Recv);
  CHECK(st.wqe_log[0].wr.wr_id == 42);
  CHECK(st.workload_state == Bytes{1, 2, 3});
}
