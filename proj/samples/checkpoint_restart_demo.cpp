// Minimal two-node tour of the library API: wire a connection through the
// interposition layer, checkpoint with a message still in flight, restart on
// a fresh engine epoch, and watch the message arrive exactly once.

#include <cstdio>

#include "ibcr/coordinator.hpp"
#include "ibcr/image.hpp"
#include "ibcr/plugin.hpp"

using namespace ibcr;

int main() {
  FabricConfig fcfg;
  fcfg.delivery_delay_ticks = 40;  // long enough to checkpoint under the message
  Fabric fabric(fcfg);

  EngineConfig ecfg;
  auto engine = std::make_unique<VerbsEngine>(fabric, ecfg, /*epoch=*/0);
  engine->add_node(0);
  engine->add_node(1);

  PluginConfig pcfg;
  pcfg.drain_interval_ticks = 5;
  CrPlugin sender(0, *engine, pcfg);
  CrPlugin receiver(1, *engine, pcfg);

  // resource creation through the wrappers: the application sees virtual ids
  auto mk = [](CrPlugin& p) {
    std::uint64_t vctx = p.open_device(0);
    std::uint64_t vpd = p.alloc_pd(vctx);
    std::uint64_t vmr = p.reg_mr(vpd, 0x1000, 0x1000, kAccessLocalWrite | kAccessRemoteWrite);
    std::uint64_t scq = p.create_cq(vctx, 16);
    std::uint64_t rcq = p.create_cq(vctx, 16);
    std::uint32_t vqp = p.create_qp(vpd, scq, rcq);
    return std::tuple{vctx, vpd, vmr, scq, rcq, vqp};
  };
  auto [sctx, spd, smr, s_scq, s_rcq, s_qp] = mk(sender);
  auto [rctx, rpd, rmr, r_scq, r_rcq, r_qp] = mk(receiver);

  // out-of-band id exchange, then the usual INIT -> RTR -> RTS handshake
  std::vector<DirTuple> tuples;
  for (auto& t : sender.export_directory_tuples()) tuples.push_back(t);
  for (auto& t : receiver.export_directory_tuples()) tuples.push_back(t);
  sender.import_directory_tuples(tuples);
  receiver.import_directory_tuples(tuples);
  sender.modify_qp(s_qp, CrPlugin::VirtTransition::to_init());
  receiver.modify_qp(r_qp, CrPlugin::VirtTransition::to_init());
  sender.modify_qp(s_qp, CrPlugin::VirtTransition::to_rtr(receiver.vlid(0), r_qp));
  receiver.modify_qp(r_qp, CrPlugin::VirtTransition::to_rtr(sender.vlid(0), s_qp));
  sender.modify_qp(s_qp, CrPlugin::VirtTransition::to_rts());
  receiver.modify_qp(r_qp, CrPlugin::VirtTransition::to_rts());

  // a receive is posted, a send goes out, and we immediately checkpoint
  Bytes payload(64);
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = std::uint8_t(i);
  engine->mem_write(0, 0x1000, ByteSpan(payload.data(), payload.size()));

  WorkRequest recv;
  recv.wr_id = 7;
  recv.opcode = Opcode::Recv;
  recv.sg_list = {{0x1000, 64, receiver.mr_vlkey(rmr)}};
  receiver.post_recv(r_qp, recv);

  WorkRequest send;
  send.wr_id = 3;
  send.opcode = Opcode::Send;
  send.sg_list = {{0x1000, 64, sender.mr_vlkey(smr)}};
  sender.post_send(s_qp, send);
  engine->progress(1);  // transmitted: the frame is now in flight

  fabric.quiesce(0);
  fabric.quiesce(1);
  DrainReport dr = sender.on_checkpoint();
  receiver.on_checkpoint();
  std::printf("checkpoint: %llu drained, %llu outstanding WQEs, %llu frame(s) in flight\n",
              (unsigned long long)dr.events_drained, (unsigned long long)dr.wqes_outstanding,
              (unsigned long long)dr.in_flight_ignored);

  Bytes img0 = serialize_image(sender.capture_state({}), true);
  Bytes img1 = serialize_image(receiver.capture_state({}), true);
  std::printf("images: %zu and %zu bytes\n", img0.size(), img1.size());

  // the original processes end here; a fresh epoch hands out new real ids
  engine->teardown_all();
  engine = std::make_unique<VerbsEngine>(fabric, ecfg, /*epoch=*/1);
  engine->add_node(0);
  engine->add_node(1);
  CrPlugin sender2(0, *engine, pcfg);
  CrPlugin receiver2(1, *engine, pcfg);
  sender2.restart_recreate(*engine, deserialize_image(ByteSpan(img0.data(), img0.size())));
  receiver2.restart_recreate(*engine, deserialize_image(ByteSpan(img1.data(), img1.size())));

  CoordinatorCore core;
  std::uint64_t c0 = core.register_client(0);
  std::uint64_t c1 = core.register_client(1);
  core.open_restart_epoch(2);
  DirectorySession pub0{[&](const std::string& ns, Bytes k, Bytes v) {
                          core.publish(c0, ns, std::move(k), std::move(v));
                        },
                        {}};
  DirectorySession pub1{[&](const std::string& ns, Bytes k, Bytes v) {
                          core.publish(c1, ns, std::move(k), std::move(v));
                        },
                        {}};
  sender2.restart_publish(pub0);
  receiver2.restart_publish(pub1);
  core.barrier_arrive(c0);
  core.barrier_arrive(c1);
  DirectorySession sub{{}, [&](const std::string& ns) {
                         std::vector<std::pair<Bytes, Bytes>> out;
                         for (auto& e : core.subscribe(ns)) out.emplace_back(e.key, e.value);
                         return out;
                       }};
  sender2.restart_rebind(sub);
  receiver2.restart_rebind(sub);
  sender2.restart_repost();
  receiver2.restart_repost();
  fabric.unquiesce(0);
  fabric.unquiesce(1);

  std::printf("restarted: qp %u now backed by real qp_num %u\n", s_qp, sender2.real_qp_num(s_qp));

  engine->progress(60);
  auto events = receiver2.poll_cq(r_rcq, 8);
  if (events.size() == 1 && engine->mem_read(1, 0x1000, 64) == payload) {
    std::printf("message arrived exactly once after restart (wr_id=%llu, %u bytes)\n",
                (unsigned long long)events[0].wr_id, events[0].byte_len);
    return 0;
  }
  std::printf("unexpected outcome: %zu events\n", events.size());
  return 1;
}
