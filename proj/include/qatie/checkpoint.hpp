// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  Versioned binary container for FP32, QAT and INT8 models.
 *
 * Byte layout (all integers little-endian):
 *
 *   "QATIECKP"                      8-byte magic
 *   u32 version                     currently 1
 *   u32 tensor count
 *   per tensor:
 *     u32 name length, name bytes
 *     u8  dtype tag                 0 f32, 1 i8, 2 u8, 3 i32
 *     u32 rank, rank × u32 dims
 *     payload                       numel × dtype width
 *   u32 qparams count
 *   per entry:
 *     u32 name length, name bytes
 *     u32 channels, channels × f64 scale, channels × i32 zero point
 *     i64 qmin, i64 qmax
 *     u8  flags                     bit0 signed, bit1 symmetric, bit2 axis
 *     i32 axis
 *   u32 config length, config bytes (JSON)
 *
 * The JSON block carries "kind" (fp32 | qat | int8), the model config, QAT
 * observer state and the INT8 op list.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "qatie/int8_graph.hpp"
#include "qatie/model.hpp"
#include "qatie/qat.hpp"

QATIE_BEGIN_NAMESPACE

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, I8 = 1, U8 = 2, I32 = 3 };

const char *dtype_name(DType t);
std::size_t dtype_width(DType t);

struct StoredTensor {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload; // little-endian element bytes
};

struct StoredQParams {
  std::string name;
  QuantParams qp;
};

struct Container {
  std::uint32_t version = kCheckpointVersion;
  std::vector<StoredTensor> tensors;
  std::vector<StoredQParams> qparams;
  nlohmann::json config;

  const StoredTensor &tensor(const std::string &name) const;
  const QuantParams &qparams_of(const std::string &name) const;
};

std::vector<std::uint8_t> encode(const Container &c);
/// Throws FormatError on bad magic, version mismatch, truncation, unknown
/// dtype tags or trailing bytes.
Container decode(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path &path,
                std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path &path);

/// Optional JSON stored under "echo" (training config, provenance).
void save_checkpoint(const Network &net, const std::filesystem::path &path,
                     const nlohmann::json &echo = nlohmann::json::object());
void save_checkpoint(const QatNetwork &net, const std::filesystem::path &path,
                     const nlohmann::json &echo = nlohmann::json::object());
void save_checkpoint(const Int8Graph &graph, const std::filesystem::path &path,
                     const nlohmann::json &echo = nlohmann::json::object());

Container to_container(const Network &net);
Container to_container(const QatNetwork &net);
Container to_container(const Int8Graph &graph);

using Model = std::variant<Network, QatNetwork, Int8Graph>;

/// Restores whichever model kind the container holds. QAT models come back
/// in Frozen mode.
Model from_container(const Container &c);
Model load_checkpoint(const std::filesystem::path &path);

/// "fp32", "qat" or "int8".
std::string model_kind(const Model &m);

QATIE_END_NAMESPACE
