#include "bincf/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace bincf {

namespace {

constexpr std::array<char, 4> kModelMagic{'D', 'G', 'C', 'B'};
constexpr std::array<char, 4> kCodesMagic{'B', 'I', 'N', 'C'};

template <typename T>
void put_le(std::ostream& os, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  char bytes[sizeof(T)];
  for (std::size_t k = 0; k < sizeof(T); ++k) {
    bytes[k] = static_cast<char>(u & 0xFF);
    u = static_cast<U>(u >> 8);
  }
  os.write(bytes, sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw DataError("unexpected end of file");
  std::make_unsigned_t<T> u = 0;
  for (std::size_t k = sizeof(T); k-- > 0;) u = static_cast<decltype(u)>((u << 8) | bytes[k]);
  return static_cast<T>(u);
}

void put_matrix(std::ostream& os, const DenseMatrix& m) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c))));
    }
  }
}

DenseMatrix get_matrix(std::istream& is, const char* name, Eigen::Index rows, Eigen::Index cols) {
  const auto r = static_cast<Eigen::Index>(get_le<std::uint32_t>(is));
  const auto c = static_cast<Eigen::Index>(get_le<std::uint32_t>(is));
  if (r != rows || c != cols) {
    throw DataError(std::string("checkpoint array ") + name + " is " + std::to_string(r) + "x" + std::to_string(c) +
                    ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  DenseMatrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = std::bit_cast<float>(get_le<std::uint32_t>(is));
  }
  return m;
}

struct ModelHeader {
  std::uint32_t users;
  std::uint32_t items;
  std::uint32_t dim;
  std::uint8_t tag;
};

void put_magic(std::ostream& os, const std::array<char, 4>& magic, std::uint32_t version) {
  os.write(magic.data(), magic.size());
  put_le<std::uint32_t>(os, version);
}

void expect_magic(std::istream& is, const std::array<char, 4>& magic, std::uint32_t version, const char* what) {
  std::array<char, 4> got{};
  if (!is.read(got.data(), got.size())) throw DataError(std::string(what) + ": file too short");
  if (got != magic) {
    throw DataError(std::string(what) + ": bad magic bytes, expected '" + std::string(magic.data(), 4) + "'");
  }
  const auto v = get_le<std::uint32_t>(is);
  if (v != version) {
    throw DataError(std::string(what) + ": format version " + std::to_string(v) + " is not supported (this build reads " +
                    std::to_string(version) + "); regenerate the artifact with this build");
  }
}

ModelHeader read_model_header(std::istream& is) {
  expect_magic(is, kModelMagic, kCheckpointVersion, "checkpoint");
  ModelHeader h{};
  h.users = get_le<std::uint32_t>(is);
  h.items = get_le<std::uint32_t>(is);
  h.dim = get_le<std::uint32_t>(is);
  h.tag = get_le<std::uint8_t>(is);
  return h;
}

void write_model_header(std::ostream& os, const ModelHeader& h) {
  put_magic(os, kModelMagic, kCheckpointVersion);
  put_le<std::uint32_t>(os, h.users);
  put_le<std::uint32_t>(os, h.items);
  put_le<std::uint32_t>(os, h.dim);
  put_le<std::uint8_t>(os, h.tag);
}

void put_norm(std::ostream& os, const ad::BatchNormState<double>& s) {
  put_matrix(os, s.gamma);
  put_matrix(os, s.beta);
  put_matrix(os, s.running_mean);
  put_matrix(os, s.running_var);
}

ad::BatchNormState<double> get_norm(std::istream& is, Eigen::Index dim) {
  auto s = ad::BatchNormState<double>::fresh(dim);
  s.gamma = get_matrix(is, "gamma", 1, dim);
  s.beta = get_matrix(is, "beta", 1, dim);
  s.running_mean = get_matrix(is, "running_mean", 1, dim);
  s.running_var = get_matrix(is, "running_var", 1, dim);
  return s;
}

void expect_end(std::istream& is, const char* what) {
  if (is.peek() != std::char_traits<char>::eof()) throw DataError(std::string(what) + ": trailing bytes");
}

template <typename Fn>
auto with_input(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    return fn(is);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

template <typename Fn>
void with_output(const std::filesystem::path& path, Fn&& fn) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  fn(os);
  if (!os.flush()) throw DataError("write failed: " + path.string());
}

}  // namespace

void write_teacher(std::ostream& os, const TeacherCheckpoint& ckpt) {
  const auto& p = ckpt.params;
  write_model_header(os, {p.num_users(), p.num_items(), p.dim(), static_cast<std::uint8_t>(p.activation)});
  put_matrix(os, p.user_embedding);
  put_matrix(os, p.item_embedding);
  put_matrix(os, p.filter0);
  put_matrix(os, p.filter1);
  put_matrix(os, p.cross0);
  put_matrix(os, p.cross1);
  put_norm(os, p.norm0);
  put_norm(os, p.norm1);
  put_matrix(os, ckpt.embeddings.users);
  put_matrix(os, ckpt.embeddings.items);
}

TeacherCheckpoint read_teacher(std::istream& is) {
  const ModelHeader h = read_model_header(is);
  if (h.tag == kStudentTag) throw DataError("checkpoint holds a student model, expected a teacher");
  if (h.tag > static_cast<std::uint8_t>(Activation::identity)) {
    throw DataError("checkpoint has unknown activation tag " + std::to_string(h.tag));
  }
  const Eigen::Index m = h.users;
  const Eigen::Index n = h.items;
  const Eigen::Index d = h.dim;
  TeacherCheckpoint ckpt;
  auto& p = ckpt.params;
  p.activation = static_cast<Activation>(h.tag);
  p.user_embedding = get_matrix(is, "U0", m, d);
  p.item_embedding = get_matrix(is, "V0", n, d);
  p.filter0 = get_matrix(is, "Theta0", d, d);
  p.filter1 = get_matrix(is, "Theta1", d, d);
  p.cross0 = get_matrix(is, "W1", m + n, d);
  p.cross1 = get_matrix(is, "W2", m + n, d);
  p.norm0 = get_norm(is, d);
  p.norm1 = get_norm(is, d);
  ckpt.embeddings.users = get_matrix(is, "U", m, 3 * d);
  ckpt.embeddings.items = get_matrix(is, "V", n, 3 * d);
  expect_end(is, "checkpoint");
  return ckpt;
}

void write_student(std::ostream& os, const StudentCheckpoint& ckpt) {
  const auto& p = ckpt.params;
  write_model_header(os, {static_cast<std::uint32_t>(p.users.rows()), static_cast<std::uint32_t>(p.items.rows()),
                          static_cast<std::uint32_t>(p.users.cols()), kStudentTag});
  put_matrix(os, p.users);
  put_matrix(os, p.items);
  const auto& c = ckpt.config;
  DenseMatrix hyper(1, 9);
  hyper << c.alpha, c.temperature, c.tau, c.beta, c.nu, c.adam.lr, c.adam.beta1, c.adam.beta2, c.adam.epsilon;
  put_matrix(os, hyper);
}

StudentCheckpoint read_student(std::istream& is) {
  const ModelHeader h = read_model_header(is);
  if (h.tag != kStudentTag) throw DataError("checkpoint holds a teacher model, expected a student");
  StudentCheckpoint ckpt;
  ckpt.params.users = get_matrix(is, "P", h.users, h.dim);
  ckpt.params.items = get_matrix(is, "Q", h.items, h.dim);
  const DenseMatrix hyper = get_matrix(is, "hyper", 1, 9);
  auto& c = ckpt.config;
  c.alpha = hyper(0, 0);
  c.temperature = hyper(0, 1);
  c.tau = hyper(0, 2);
  c.beta = hyper(0, 3);
  c.nu = hyper(0, 4);
  c.adam.lr = hyper(0, 5);
  c.adam.beta1 = hyper(0, 6);
  c.adam.beta2 = hyper(0, 7);
  c.adam.epsilon = hyper(0, 8);
  c.code_length = h.dim;
  expect_end(is, "checkpoint");
  return ckpt;
}

void write_codes(std::ostream& os, const PackedCodes& codes) {
  put_magic(os, kCodesMagic, kCodesVersion);
  put_le<std::uint32_t>(os, codes.rows);
  put_le<std::uint32_t>(os, codes.dim);
  put_le<std::uint32_t>(os, codes.words_per_row);
  for (std::uint64_t w : codes.words) put_le<std::uint64_t>(os, w);
}

PackedCodes read_codes(std::istream& is) {
  expect_magic(is, kCodesMagic, kCodesVersion, "code file");
  PackedCodes codes;
  codes.rows = get_le<std::uint32_t>(is);
  codes.dim = get_le<std::uint32_t>(is);
  codes.words_per_row = get_le<std::uint32_t>(is);
  if (codes.words_per_row != PackedCodes::words_for(codes.dim)) {
    throw DataError("code file: words-per-row " + std::to_string(codes.words_per_row) + " inconsistent with d = " +
                    std::to_string(codes.dim));
  }
  codes.words.resize(static_cast<std::size_t>(codes.rows) * codes.words_per_row);
  for (auto& w : codes.words) w = get_le<std::uint64_t>(is);
  if (codes.dim % 64 != 0) {
    const std::uint64_t pad_mask = ~((std::uint64_t{1} << (codes.dim % 64)) - 1);
    for (Index r = 0; r < codes.rows; ++r) {
      if (codes.row(r).back() & pad_mask) throw DataError("code file: nonzero padding bits in row " + std::to_string(r));
    }
  }
  expect_end(is, "code file");
  return codes;
}

void save_teacher(const std::filesystem::path& path, const TeacherCheckpoint& ckpt) {
  with_output(path, [&](std::ostream& os) { write_teacher(os, ckpt); });
}

TeacherCheckpoint load_teacher(const std::filesystem::path& path) {
  return with_input(path, [](std::istream& is) { return read_teacher(is); });
}

void save_student(const std::filesystem::path& path, const StudentCheckpoint& ckpt) {
  with_output(path, [&](std::ostream& os) { write_student(os, ckpt); });
}

StudentCheckpoint load_student(const std::filesystem::path& path) {
  return with_input(path, [](std::istream& is) { return read_student(is); });
}

void save_codes(const std::filesystem::path& path, const PackedCodes& codes) {
  with_output(path, [&](std::ostream& os) { write_codes(os, codes); });
}

PackedCodes load_codes(const std::filesystem::path& path) {
  return with_input(path, [](std::istream& is) { return read_codes(is); });
}

CheckpointKind peek_checkpoint_kind(const std::filesystem::path& path) {
  return with_input(path, [](std::istream& is) {
    const ModelHeader h = read_model_header(is);
    return h.tag == kStudentTag ? CheckpointKind::student : CheckpointKind::teacher;
  });
}

}  // namespace bincf
