#pragma once

// Binary artifact formats. Everything is little-endian.
//
// Model checkpoint ("DGCB"):
//   magic[4] version:u32 M:u32 N:u32 D:u32 tag:u8
//   then arrays, each as rows:u32 cols:u32 followed by rows*cols f32, row-major.
//   Teacher (tag = activation 0..2): U0 V0 Theta0 Theta1 W1 W2
//     gamma0 beta0 mean0 var0 gamma1 beta1 mean1 var1 U V
//   Student (tag = 0x80, D = code length): P Q hyper(1x9)
//
// Packed codes ("BINC"):
//   magic[4] version:u32 rows:u32 d:u32 words_per_row:u32, then u64 words.

#include "bincf/binindex.hpp"
#include "bincf/student.hpp"
#include "bincf/teacher.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>

namespace bincf {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kCodesVersion = 1;
inline constexpr std::uint8_t kStudentTag = 0x80;

enum class CheckpointKind { teacher, student };

void write_teacher(std::ostream& os, const TeacherCheckpoint& ckpt);
TeacherCheckpoint read_teacher(std::istream& is);
void write_student(std::ostream& os, const StudentCheckpoint& ckpt);
StudentCheckpoint read_student(std::istream& is);
void write_codes(std::ostream& os, const PackedCodes& codes);
PackedCodes read_codes(std::istream& is);

void save_teacher(const std::filesystem::path& path, const TeacherCheckpoint& ckpt);
TeacherCheckpoint load_teacher(const std::filesystem::path& path);
void save_student(const std::filesystem::path& path, const StudentCheckpoint& ckpt);
StudentCheckpoint load_student(const std::filesystem::path& path);
void save_codes(const std::filesystem::path& path, const PackedCodes& codes);
PackedCodes load_codes(const std::filesystem::path& path);

/// Reads only the header to tell model kinds apart.
CheckpointKind peek_checkpoint_kind(const std::filesystem::path& path);

}  // namespace bincf
