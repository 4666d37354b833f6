#pragma once

#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ibcr/hashutil.hpp"
#include "ibcr/state.hpp"

namespace ibcr {

// Checkpoint image, version 1. Little-endian throughout.
//
//   header:  magic "IBCR", version u16, node_id u64, epoch u64, section_count u32
//   table:   per section: id u8, flags u8 (bit0 = deflate), offset u64,
//            stored_len u64, raw_len u64, crc32 u32 (crc of the raw bytes)
//   body:    section payloads at their table offsets
//
// Section payload layouts are defined by the encoders below.

enum class SectionId : std::uint8_t {
  Memory = 1,
  ResourceLog = 2,
  WqeLog = 3,
  DrainedCq = 4,
  Translation = 5,
  WorkloadState = 6,
};

struct ImageStats {
  std::uint64_t bytes_written = 0;
  std::size_t sections = 0;
};

namespace imagecodec {

inline constexpr char kMagic[4] = {'I', 'B', 'C', 'R'};
inline constexpr std::uint16_t kVersion = 1;

inline void put_wr(Bytes& out, const WorkRequest& wr) {
  store_le64(out, wr.wr_id);
  out.push_back(static_cast<std::uint8_t>(wr.opcode));
  out.push_back(wr.signaled ? 1 : 0);
  out.push_back(wr.inline_data ? 1 : 0);
  out.push_back(wr.remote_addr ? 1 : 0);
  store_le64(out, wr.remote_addr.value_or(0));
  out.push_back(wr.rkey ? 1 : 0);
  store_le32(out, wr.rkey.value_or(0));
  out.push_back(wr.imm ? 1 : 0);
  store_le32(out, wr.imm.value_or(0));
  store_le32(out, static_cast<std::uint32_t>(wr.sg_list.size()));
  for (const Sge& sg : wr.sg_list) {
    store_le64(out, sg.addr);
    store_le32(out, sg.length);
    store_le32(out, sg.lkey);
  }
}

inline WorkRequest get_wr(ByteReader& r) {
  WorkRequest wr;
  wr.wr_id = r.u64le();
  wr.opcode = static_cast<Opcode>(r.u8());
  wr.signaled = r.u8() != 0;
  wr.inline_data = r.u8() != 0;
  bool has_remote = r.u8() != 0;
  std::uint64_t remote = r.u64le();
  if (has_remote) wr.remote_addr = remote;
  bool has_rkey = r.u8() != 0;
  std::uint32_t rkey = r.u32le();
  if (has_rkey) wr.rkey = rkey;
  bool has_imm = r.u8() != 0;
  std::uint32_t imm = r.u32le();
  if (has_imm) wr.imm = imm;
  std::uint32_t n = r.u32le();
  for (std::uint32_t i = 0; i < n; ++i) {
    Sge sg;
    sg.addr = r.u64le();
    sg.length = r.u32le();
    sg.lkey = r.u32le();
    wr.sg_list.push_back(sg);
  }
  return wr;
}

inline void put_event(Bytes& out, const CompletionEvent& ev) {
  store_le64(out, ev.wr_id);
  out.push_back(static_cast<std::uint8_t>(ev.status));
  out.push_back(static_cast<std::uint8_t>(ev.detail));
  out.push_back(static_cast<std::uint8_t>(ev.opcode));
  store_le32(out, ev.byte_len);
  out.push_back(ev.imm ? 1 : 0);
  store_le32(out, ev.imm.value_or(0));
  store_le32(out, ev.qp_num);
}

inline CompletionEvent get_event(ByteReader& r) {
  CompletionEvent ev;
  ev.wr_id = r.u64le();
  ev.status = static_cast<WcStatus>(r.u8());
  ev.detail = static_cast<WcDetail>(r.u8());
  ev.opcode = static_cast<Opcode>(r.u8());
  ev.byte_len = r.u32le();
  bool has_imm = r.u8() != 0;
  std::uint32_t imm = r.u32le();
  if (has_imm) ev.imm = imm;
  ev.qp_num = r.u32le();
  return ev;
}

inline Bytes encode_memory(const std::vector<MemorySection>& mem) {
  Bytes out;
  store_le32(out, static_cast<std::uint32_t>(mem.size()));
  for (const auto& m : mem) {
    store_le64(out, m.base_addr);
    store_le64(out, m.bytes.size());
    out.insert(out.end(), m.bytes.begin(), m.bytes.end());
  }
  return out;
}

inline std::vector<MemorySection> decode_memory(ByteSpan data) {
  ByteReader r(data, Errc::CorruptImage);
  std::vector<MemorySection> out;
  std::uint32_t n = r.u32le();
  for (std::uint32_t i = 0; i < n; ++i) {
    MemorySection m;
    m.base_addr = r.u64le();
    std::uint64_t len = r.u64le();
    m.bytes = r.blob(len);
    out.push_back(std::move(m));
  }
  if (!r.done()) fail(Errc::CorruptImage, "memory section has trailing bytes");
  return out;
}

inline Bytes encode_resource_log(const std::vector<CreationRecord>& creations,
                                 const std::vector<ModifyRecord>& modifies) {
  Bytes out;
  store_le32(out, static_cast<std::uint32_t>(creations.size()));
  for (const auto& c : creations) {
    out.push_back(static_cast<std::uint8_t>(c.kind));
    store_le64(out, c.virtual_id);
    store_le32(out, c.port_index);
    store_le16(out, c.vlid);
    store_le64(out, c.pd_vid);
    store_le64(out, c.base_addr);
    store_le64(out, c.length);
    store_le32(out, c.access);
    store_le32(out, c.vlkey);
    store_le32(out, c.vrkey);
    store_le64(out, c.capacity);
    store_le64(out, c.send_cq_vid);
    store_le64(out, c.recv_cq_vid);
    out.push_back(c.srq_vid ? 1 : 0);
    store_le64(out, c.srq_vid.value_or(0));
    store_le32(out, c.vqp_num);
    store_le32(out, c.srq_limit);
    store_le64(out, c.ctx_vid);
  }
  store_le32(out, static_cast<std::uint32_t>(modifies.size()));
  for (const auto& m : modifies) {
    store_le64(out, m.vqp);
    out.push_back(static_cast<std::uint8_t>(m.target));
    store_le16(out, m.remote_vlid);
    store_le32(out, m.remote_vqp_num);
  }
  return out;
}

inline void decode_resource_log(ByteSpan data, std::vector<CreationRecord>& creations,
                                std::vector<ModifyRecord>& modifies) {
  ByteReader r(data, Errc::CorruptImage);
  std::uint32_t nc = r.u32le();
  for (std::uint32_t i = 0; i < nc; ++i) {
    CreationRecord c;
    c.kind = static_cast<ResourceKind>(r.u8());
    c.virtual_id = r.u64le();
    c.port_index = r.u32le();
    c.vlid = r.u16le();
    c.pd_vid = r.u64le();
    c.base_addr = r.u64le();
    c.length = r.u64le();
    c.access = r.u32le();
    c.vlkey = r.u32le();
    c.vrkey = r.u32le();
    c.capacity = r.u64le();
    c.send_cq_vid = r.u64le();
    c.recv_cq_vid = r.u64le();
    bool has_srq = r.u8() != 0;
    std::uint64_t srq = r.u64le();
    if (has_srq) c.srq_vid = srq;
    c.vqp_num = r.u32le();
    c.srq_limit = r.u32le();
    c.ctx_vid = r.u64le();
    creations.push_back(c);
  }
  std::uint32_t nm = r.u32le();
  for (std::uint32_t i = 0; i < nm; ++i) {
    ModifyRecord m;
    m.vqp = r.u64le();
    m.target = static_cast<QpState>(r.u8());
    m.remote_vlid = r.u16le();
    m.remote_vqp_num = r.u32le();
    modifies.push_back(m);
  }
  if (!r.done()) fail(Errc::CorruptImage, "resource log has trailing bytes");
}

inline Bytes encode_wqe_log(const std::vector<WqeLogEntry>& log) {
  Bytes out;
  store_le32(out, static_cast<std::uint32_t>(log.size()));
  for (const auto& e : log) {
    out.push_back(static_cast<std::uint8_t>(e.queue));
    store_le64(out, e.owner_vid);
    store_le64(out, e.post_idx);
    put_wr(out, e.wr);
    store_blob32(out, ByteSpan(e.captured_payload.data(), e.captured_payload.size()));
  }
  return out;
}

inline std::vector<WqeLogEntry> decode_wqe_log(ByteSpan data) {
  ByteReader r(data, Errc::CorruptImage);
  std::vector<WqeLogEntry> out;
  std::uint32_t n = r.u32le();
  for (std::uint32_t i = 0; i < n; ++i) {
    WqeLogEntry e;
    e.queue = static_cast<WqeQueueKind>(r.u8());
    e.owner_vid = r.u64le();
    e.post_idx = r.u64le();
    e.wr = get_wr(r);
    e.captured_payload = r.blob32();
    out.push_back(std::move(e));
  }
  if (!r.done()) fail(Errc::CorruptImage, "wqe log has trailing bytes");
  return out;
}

inline Bytes encode_drained(const std::vector<DrainedCqEntry>& drained) {
  Bytes out;
  store_le32(out, static_cast<std::uint32_t>(drained.size()));
  for (const auto& d : drained) {
    store_le64(out, d.vcq);
    put_event(out, d.event);
  }
  return out;
}

inline std::vector<DrainedCqEntry> decode_drained(ByteSpan data) {
  ByteReader r(data, Errc::CorruptImage);
  std::vector<DrainedCqEntry> out;
  std::uint32_t n = r.u32le();
  for (std::uint32_t i = 0; i < n; ++i) {
    DrainedCqEntry d;
    d.vcq = r.u64le();
    d.event = get_event(r);
    out.push_back(d);
  }
  if (!r.done()) fail(Errc::CorruptImage, "drained section has trailing bytes");
  return out;
}

template <class K, class V>
void put_map(Bytes& out, const std::map<K, V>& m,
             void (*put_k)(Bytes&, K), void (*put_v)(Bytes&, V)) {
  store_le32(out, static_cast<std::uint32_t>(m.size()));
  for (const auto& [k, v] : m) {
    put_k(out, k);
    put_v(out, v);
  }
}

inline void put_u64(Bytes& out, std::uint64_t v) { store_le64(out, v); }
inline void put_u32(Bytes& out, std::uint32_t v) { store_le32(out, v); }
inline void put_u16(Bytes& out, std::uint16_t v) { store_le16(out, v); }

inline Bytes encode_translation(const TranslationState& t) {
  Bytes out;
  put_map<std::uint64_t, std::uint64_t>(out, t.ctx, put_u64, put_u64);
  put_map<std::uint64_t, std::uint64_t>(out, t.pd, put_u64, put_u64);
  put_map<std::uint64_t, std::uint64_t>(out, t.mr, put_u64, put_u64);
  put_map<std::uint64_t, std::uint64_t>(out, t.cq, put_u64, put_u64);
  put_map<std::uint64_t, std::uint64_t>(out, t.qp, put_u64, put_u64);
  put_map<std::uint64_t, std::uint64_t>(out, t.srq, put_u64, put_u64);
  put_map<std::uint32_t, std::uint32_t>(out, t.vlkey_to_lkey, put_u32, put_u32);
  put_map<std::uint32_t, std::uint32_t>(out, t.vrkey_to_rkey, put_u32, put_u32);
  put_map<std::uint16_t, std::uint16_t>(out, t.vlid_to_lid, put_u16, put_u16);
  put_map<std::uint32_t, std::uint32_t>(out, t.vqp_to_qp, put_u32, put_u32);
  out.push_back(static_cast<std::uint8_t>(t.policy));
  store_le64(out, t.next_virtual);
  out.push_back(t.restarted ? 1 : 0);
  return out;
}

inline TranslationState decode_translation(ByteSpan data) {
  ByteReader r(data, Errc::CorruptImage);
  TranslationState t;
  auto get_map64 = [&](std::map<std::uint64_t, std::uint64_t>& m) {
    std::uint32_t n = r.u32le();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::uint64_t k = r.u64le();
      m[k] = r.u64le();
    }
  };
  auto get_map32 = [&](std::map<std::uint32_t, std::uint32_t>& m) {
    std::uint32_t n = r.u32le();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::uint32_t k = r.u32le();
      m[k] = r.u32le();
    }
  };
  get_map64(t.ctx);
  get_map64(t.pd);
  get_map64(t.mr);
  get_map64(t.cq);
  get_map64(t.qp);
  get_map64(t.srq);
  get_map32(t.vlkey_to_lkey);
  get_map32(t.vrkey_to_rkey);
  {
    std::uint32_t n = r.u32le();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::uint16_t k = r.u16le();
      t.vlid_to_lid[k] = r.u16le();
    }
  }
  get_map32(t.vqp_to_qp);
  t.policy = static_cast<IdPolicy>(r.u8());
  t.next_virtual = r.u64le();
  t.restarted = r.u8() != 0;
  if (!r.done()) fail(Errc::CorruptImage, "translation section has trailing bytes");
  return t;
}

inline Bytes deflate_bytes(ByteSpan raw) {
  uLongf bound = compressBound(uLong(raw.size()));
  Bytes out(bound);
  if (compress2(out.data(), &bound, raw.data(), uLong(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK)
    fail(Errc::WriteFailed, "deflate failed");
  out.resize(bound);
  return out;
}

inline Bytes inflate_bytes(ByteSpan stored, std::uint64_t raw_len) {
  Bytes out(raw_len);
  uLongf len = uLongf(raw_len);
  if (uncompress(out.data(), &len, stored.data(), uLong(stored.size())) != Z_OK || len != raw_len)
    fail(Errc::CorruptImage, "inflate failed");
  return out;
}

}  // namespace imagecodec

inline Bytes serialize_image(const NodeCheckpointState& st, bool compress) {
  using namespace imagecodec;
  struct Section {
    SectionId id;
    Bytes raw;
  };
  std::vector<Section> sections;
  sections.push_back({SectionId::Memory, encode_memory(st.memory)});
  sections.push_back({SectionId::ResourceLog, encode_resource_log(st.creations, st.modifies)});
  sections.push_back({SectionId::WqeLog, encode_wqe_log(st.wqe_log)});
  sections.push_back({SectionId::DrainedCq, encode_drained(st.drained)});
  sections.push_back({SectionId::Translation, encode_translation(st.translation)});
  sections.push_back({SectionId::WorkloadState, st.workload_state});

  Bytes header;
  header.insert(header.end(), kMagic, kMagic + 4);
  store_le16(header, kVersion);
  store_le64(header, st.node_id);
  store_le64(header, st.epoch);
  store_le32(header, static_cast<std::uint32_t>(sections.size()));

  constexpr std::size_t kTableEntry = 1 + 1 + 8 + 8 + 8 + 4;
  std::uint64_t offset = header.size() + sections.size() * kTableEntry;

  Bytes table, body;
  for (auto& s : sections) {
    std::uint64_t raw_len = s.raw.size();
    std::uint32_t crc = crc32(ByteSpan(s.raw.data(), s.raw.size()));
    Bytes stored =
        compress ? deflate_bytes(ByteSpan(s.raw.data(), s.raw.size())) : std::move(s.raw);
    table.push_back(static_cast<std::uint8_t>(s.id));
    table.push_back(compress ? 1 : 0);
    store_le64(table, offset);
    store_le64(table, stored.size());
    store_le64(table, raw_len);
    store_le32(table, crc);
    offset += stored.size();
    body.insert(body.end(), stored.begin(), stored.end());
  }

  Bytes out;
  out.reserve(header.size() + table.size() + body.size());
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), table.begin(), table.end());
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline NodeCheckpointState deserialize_image(ByteSpan data) {
  using namespace imagecodec;
  if (data.size() < 26) fail(Errc::UnsupportedImage, "image shorter than a header");
  if (std::memcmp(data.data(), kMagic, 4) != 0) fail(Errc::UnsupportedImage, "bad magic");
  ByteReader r(data.subspan(4), Errc::CorruptImage);
  std::uint16_t version = r.u16le();
  if (version != kVersion)
    fail(Errc::UnsupportedImage, "image version " + std::to_string(version));

  NodeCheckpointState st;
  st.node_id = NodeId(r.u64le());
  st.epoch = r.u64le();
  std::uint32_t nsections = r.u32le();
  if (nsections > 64) fail(Errc::CorruptImage, "implausible section count");

  bool seen[7] = {};
  for (std::uint32_t i = 0; i < nsections; ++i) {
    std::uint8_t id = r.u8();
    std::uint8_t flags = r.u8();
    std::uint64_t offset = r.u64le();
    std::uint64_t stored_len = r.u64le();
    std::uint64_t raw_len = r.u64le();
    std::uint32_t crc = r.u32le();
    if (id < 1 || id > 6) fail(Errc::CorruptImage, "unknown section id");
    if (offset + stored_len > data.size() || offset + stored_len < offset)
      fail(Errc::CorruptImage, "section extends past end of image");
    ByteSpan stored = data.subspan(offset, stored_len);
    Bytes raw = (flags & 1) ? inflate_bytes(stored, raw_len) : Bytes(stored.begin(), stored.end());
    if (raw.size() != raw_len) fail(Errc::CorruptImage, "section length mismatch");
    if (crc32(ByteSpan(raw.data(), raw.size())) != crc)
      fail(Errc::CorruptImage, "section crc mismatch");
    seen[id] = true;
    switch (static_cast<SectionId>(id)) {
      case SectionId::Memory:
        st.memory = decode_memory(ByteSpan(raw.data(), raw.size()));
        break;
      case SectionId::ResourceLog:
        decode_resource_log(ByteSpan(raw.data(), raw.size()), st.creations, st.modifies);
        break;
      case SectionId::WqeLog:
        st.wqe_log = decode_wqe_log(ByteSpan(raw.data(), raw.size()));
        break;
      case SectionId::DrainedCq:
        st.drained = decode_drained(ByteSpan(raw.data(), raw.size()));
        break;
      case SectionId::Translation:
        st.translation = decode_translation(ByteSpan(raw.data(), raw.size()));
        break;
      case SectionId::WorkloadState:
        st.workload_state = std::move(raw);
        break;
    }
  }
  for (int id = 1; id <= 6; ++id)
    if (!seen[id]) fail(Errc::CorruptImage, "missing section");
  return st;
}

inline ImageStats write_image(const NodeCheckpointState& st, const std::string& path,
                              bool compress) {
  Bytes data = serialize_image(st, compress);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::WriteFailed, path);
  out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
  out.flush();
  if (!out) fail(Errc::WriteFailed, path);
  return {data.size(), 6};
}

inline NodeCheckpointState read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::ImageMissing, path);
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_image(ByteSpan(data.data(), data.size()));
}

}  // namespace ibcr
