#pragma once

#include <optional>

#include "ibcr/common.hpp"

namespace ibcr {

enum class FrameKind : std::uint8_t {
  SendData = 1,
  RdmaWriteData = 2,
  RdmaReadReq = 3,
  RdmaReadResp = 4,
  DeliveryAck = 5,
};

// One reliable-connection message. Acks and read responses reuse remote_addr
// to carry the sequence number of the frame they answer.
struct Frame {
  ConnId conn_id = 0;
  std::uint64_t seq = 0;
  FrameKind kind = FrameKind::SendData;
  Bytes payload;
  std::optional<std::uint32_t> imm;
  std::uint64_t remote_addr = 0;
  std::uint32_t rkey = 0;

  bool operator==(const Frame&) const = default;
};

inline constexpr std::uint8_t kFrameMagic = 0xF1;

// Wire encoding: magic, kind u8, conn_id u64, seq u64, imm_present u8, imm u32,
// remote_addr u64, rkey u32, payload_len u32, payload. All little-endian.
// A big-endian u32 length prefix precedes the record on stream transports.
inline Bytes encode_frame(const Frame& f) {
  Bytes out;
  out.reserve(39 + f.payload.size());
  out.push_back(kFrameMagic);
  out.push_back(static_cast<std::uint8_t>(f.kind));
  store_le64(out, f.conn_id);
  store_le64(out, f.seq);
  out.push_back(f.imm ? 1 : 0);
  store_le32(out, f.imm.value_or(0));
  store_le64(out, f.remote_addr);
  store_le32(out, f.rkey);
  store_le32(out, static_cast<std::uint32_t>(f.payload.size()));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

inline Frame decode_frame(ByteSpan data) {
  ByteReader r(data, Errc::WireError);
  if (r.u8() != kFrameMagic) fail(Errc::WireError, "bad frame magic");
  Frame f;
  std::uint8_t kind = r.u8();
  if (kind < 1 || kind > 5) fail(Errc::WireError, "bad frame kind");
  f.kind = static_cast<FrameKind>(kind);
  f.conn_id = r.u64le();
  f.seq = r.u64le();
  std::uint8_t imm_present = r.u8();
  std::uint32_t imm = r.u32le();
  if (imm_present) f.imm = imm;
  f.remote_addr = r.u64le();
  f.rkey = r.u32le();
  f.payload = r.blob32();
  if (!r.done()) fail(Errc::WireError, "trailing bytes after frame");
  return f;
}

inline Bytes frame_record_with_length(const Frame& f) {
  Bytes rec = encode_frame(f);
  Bytes out;
  out.reserve(rec.size() + 4);
  store_be32(out, static_cast<std::uint32_t>(rec.size()));
  out.insert(out.end(), rec.begin(), rec.end());
  return out;
}

}  // namespace ibcr
