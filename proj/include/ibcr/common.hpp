#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ibcr {

using Tick = std::uint64_t;
using NodeId = std::uint32_t;
using ConnId = std::uint64_t;
using Bytes = std::vector<std::uint8_t>;
using ByteSpan = std::span<const std::uint8_t>;

// Error codes for every failure named by an operation contract.
enum class Errc : int {
  Ok = 0,
  AddressUnknown,
  SelfConnectRejected,
  RebindWhileActive,
  StaleHandle,
  InvalidRange,
  InvalidTransition,
  InvalidWorkRequest,
  RemoteUnknown,
  CqOverflow,
  UnknownRemoteVirtualId,
  UnknownVrkey,
  RestartDirectoryIncomplete,
  CorruptImage,
  UnsupportedImage,
  WriteFailed,
  ImageMissing,
  DuplicateNode,
  RegistrationClosed,
  PublishConflict,
  InvalidNamespace,
  BarrierNotReached,
  CheckpointAborted,
  RestartAborted,
  DegenerateInputs,
  SpecError,
  WireError,
};

inline std::string_view errc_name(Errc e) {
  switch (e) {
    case Errc::Ok: return "Ok";
    case Errc::AddressUnknown: return "AddressUnknown";
    case Errc::SelfConnectRejected: return "SelfConnectRejected";
    case Errc::RebindWhileActive: return "RebindWhileActive";
    case Errc::StaleHandle: return "StaleHandle";
    case Errc::InvalidRange: return "InvalidRange";
    case Errc::InvalidTransition: return "InvalidTransition";
    case Errc::InvalidWorkRequest: return "InvalidWorkRequest";
    case Errc::RemoteUnknown: return "RemoteUnknown";
    case Errc::CqOverflow: return "CqOverflow";
    case Errc::UnknownRemoteVirtualId: return "UnknownRemoteVirtualId";
    case Errc::UnknownVrkey: return "UnknownVrkey";
    case Errc::RestartDirectoryIncomplete: return "RestartDirectoryIncomplete";
    case Errc::CorruptImage: return "CorruptImage";
    case Errc::UnsupportedImage: return "UnsupportedImage";
    case Errc::WriteFailed: return "WriteFailed";
    case Errc::ImageMissing: return "ImageMissing";
    case Errc::DuplicateNode: return "DuplicateNode";
    case Errc::RegistrationClosed: return "RegistrationClosed";
    case Errc::PublishConflict: return "PublishConflict";
    case Errc::InvalidNamespace: return "InvalidNamespace";
    case Errc::BarrierNotReached: return "BarrierNotReached";
    case Errc::CheckpointAborted: return "CheckpointAborted";
    case Errc::RestartAborted: return "RestartAborted";
    case Errc::DegenerateInputs: return "DegenerateInputs";
    case Errc::SpecError: return "SpecError";
    case Errc::WireError: return "WireError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

// ---- endian helpers (explicit, independent of host order) ----

inline void store_le16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void store_le32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void store_le64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void store_be32(Bytes& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t load_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

// Sequential reader over a byte buffer; overruns raise the configured error code.
class ByteReader {
public:
  ByteReader(ByteSpan data, Errc on_overrun = Errc::WireError)
      : data_(data), on_overrun_(on_overrun) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }

  std::uint16_t u16le() {
    need(2);
    std::uint16_t v = std::uint16_t(data_[pos_]) | (std::uint16_t(data_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32le() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | data_[pos_ + std::size_t(i)];
    pos_ += 4;
    return v;
  }

  std::uint64_t u64le() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | data_[pos_ + std::size_t(i)];
    pos_ += 8;
    return v;
  }

  Bytes blob(std::size_t n) {
    need(n);
    Bytes b(data_.begin() + long(pos_), data_.begin() + long(pos_ + n));
    pos_ += n;
    return b;
  }

  // u16 length-prefixed string (coordinator wire convention)
  std::string str16() {
    std::uint16_t n = u16le();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  // u32 length-prefixed byte blob
  Bytes blob32() {
    std::uint32_t n = u32le();
    return blob(n);
  }

private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) fail(on_overrun_, "truncated record");
  }

  ByteSpan data_;
  std::size_t pos_ = 0;
  Errc on_overrun_;
};

inline void store_str16(Bytes& out, std::string_view s) {
  if (s.size() > 0xFFFF) fail(Errc::WireError, "string too long");
  store_le16(out, static_cast<std::uint16_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

inline void store_blob32(Bytes& out, ByteSpan b) {
  store_le32(out, static_cast<std::uint32_t>(b.size()));
  out.insert(out.end(), b.begin(), b.end());
}

}  // namespace ibcr
