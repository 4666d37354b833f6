#pragma once

#include <map>
#include <optional>
#include <vector>

#include "ibcr/verbs.hpp"

namespace ibcr {

// Counts reported by a checkpoint drain.
struct DrainReport {
  std::uint64_t events_drained = 0;
  std::uint64_t wqes_outstanding = 0;
  std::uint64_t in_flight_ignored = 0;
  std::uint64_t rounds = 0;

  bool operator==(const DrainReport&) const = default;
};

enum class ResourceKind : std::uint8_t { Ctx = 1, Pd = 2, Mr = 3, Cq = 4, Qp = 5, Srq = 6 };

enum class IdPolicy : std::uint8_t {
  // Virtual id equals the real id handed out at creation; resources created
  // after a restart switch to the node-scoped space to avoid collisions.
  RealEqualsVirtualAtCreate = 0,
  // Virtual ids are node-prefixed from the start.
  GloballyUniqueVirtual = 1,
};

// One resource creation, replayable against a fresh engine. Parameters refer
// to other resources by their virtual ids.
struct CreationRecord {
  ResourceKind kind = ResourceKind::Ctx;
  std::uint64_t virtual_id = 0;
  // CTX
  std::uint32_t port_index = 0;
  std::uint16_t vlid = 0;
  // MR / QP / SRQ
  std::uint64_t pd_vid = 0;
  // MR
  std::uint64_t base_addr = 0;
  std::uint64_t length = 0;
  std::uint32_t access = 0;
  std::uint32_t vlkey = 0;
  std::uint32_t vrkey = 0;
  // CQ
  std::uint64_t capacity = 0;
  // QP
  std::uint64_t send_cq_vid = 0;
  std::uint64_t recv_cq_vid = 0;
  std::optional<std::uint64_t> srq_vid;
  std::uint32_t vqp_num = 0;
  // SRQ
  std::uint32_t srq_limit = 0;
  // CTX / others
  std::uint64_t ctx_vid = 0;

  bool operator==(const CreationRecord&) const = default;
};

struct ModifyRecord {
  std::uint64_t vqp = 0;  // virtual qp id
  QpState target = QpState::Init;
  std::uint16_t remote_vlid = 0;
  std::uint32_t remote_vqp_num = 0;

  bool operator==(const ModifyRecord&) const = default;
};

enum class WqeQueueKind : std::uint8_t { Send = 1, Recv = 2, SrqRecv = 3 };

// A posted work request that has not completed from the application's point
// of view. Keys inside `wr` are virtual; captured_payload holds inline bytes.
struct WqeLogEntry {
  WqeQueueKind queue = WqeQueueKind::Send;
  std::uint64_t owner_vid = 0;  // virtual qp or srq id
  std::uint64_t post_idx = 0;
  WorkRequest wr;
  Bytes captured_payload;

  bool operator==(const WqeLogEntry&) const = default;
};

struct DrainedCqEntry {
  std::uint64_t vcq = 0;
  CompletionEvent event;  // qp_num rewritten to the virtual qp number

  bool operator==(const DrainedCqEntry&) const = default;
};

struct TranslationState {
  // per-kind virtual -> real maps (real ids refreshed on restart)
  std::map<std::uint64_t, std::uint64_t> ctx, pd, mr, cq, qp, srq;
  std::map<std::uint32_t, std::uint32_t> vlkey_to_lkey;
  std::map<std::uint32_t, std::uint32_t> vrkey_to_rkey;
  std::map<std::uint16_t, std::uint16_t> vlid_to_lid;
  std::map<std::uint32_t, std::uint32_t> vqp_to_qp;
  IdPolicy policy = IdPolicy::RealEqualsVirtualAtCreate;
  std::uint64_t next_virtual = 1;  // node-scoped allocator state
  bool restarted = false;

  bool operator==(const TranslationState&) const = default;
};

struct MemorySection {
  std::uint64_t base_addr = 0;
  Bytes bytes;

  bool operator==(const MemorySection&) const = default;
};

// Everything a node needs to rebuild its verbs world elsewhere.
struct NodeCheckpointState {
  NodeId node_id = 0;
  std::uint64_t epoch = 0;
  std::vector<MemorySection> memory;
  std::vector<CreationRecord> creations;
  std::vector<ModifyRecord> modifies;
  std::vector<WqeLogEntry> wqe_log;
  std::vector<DrainedCqEntry> drained;
  TranslationState translation;
  Bytes workload_state;

  bool operator==(const NodeCheckpointState&) const = default;
};

}  // namespace ibcr
