#pragma once

// Model checkpoints.
//
// Structured text, one record per line; reals are written as hexadecimal
// floating point so a save/load round trip is bit-exact.
//
//   milal-checkpoint 1
//   epochs_done <E>
//   config <key>=<value>            (one line per config entry)
//   running_mean <n> <hex>...
//   running_var <n> <hex>...
//   param <name> <rows> <cols> <hex>...
//   adam <step> <lr> <beta1> <beta2> <eps>
//   adam_m <index> <rows> <cols> <hex>...
//   adam_v <index> <rows> <cols> <hex>...
//   checksum <fnv1a-64 of all preceding bytes, hex>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "milal/autodiff.hpp"
#include "milal/config.hpp"
#include "milal/error.hpp"
#include "milal/model.hpp"

namespace milal {

struct Checkpoint {
  RunConfig config;
  MilModel model;
  AdamState adam;
  int epochs_done = 0;
};

namespace detail {

inline void put_hex(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
  out.push_back(' ');
  out.append(buf, res.ptr);
}

inline double get_hex(std::istream& in, const std::string& what) {
  std::string tok;
  if (!(in >> tok)) throw IntegrityError("checkpoint: truncated " + what);
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v, std::chars_format::hex);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw IntegrityError("checkpoint: bad number '" + tok + "' in " + what);
  }
  return v;
}

inline void put_matrix(std::string& out, const Matrix& m) {
  out += " " + std::to_string(m.rows()) + " " + std::to_string(m.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) put_hex(out, m.data()[i]);
}

inline Matrix get_matrix(std::istream& in, const std::string& what) {
  Eigen::Index r = 0, c = 0;
  if (!(in >> r >> c) || r < 0 || c < 0) throw IntegrityError("checkpoint: bad shape for " + what);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_hex(in, what);
  return m;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "milal-checkpoint 1\n";
  out += "epochs_done " + std::to_string(ck.epochs_done) + "\n";
  for (const auto& [k, v] : ck.config.to_entries()) out += "config " + k + "=" + v + "\n";
  out += "running_mean " + std::to_string(ck.model.running_mean().size());
  for (Eigen::Index i = 0; i < ck.model.running_mean().size(); ++i) detail::put_hex(out, ck.model.running_mean()(i));
  out += "\nrunning_var " + std::to_string(ck.model.running_var().size());
  for (Eigen::Index i = 0; i < ck.model.running_var().size(); ++i) detail::put_hex(out, ck.model.running_var()(i));
  out += "\n";
  for (const Parameter* p : ck.model.parameters()) {
    out += "param " + p->name;
    detail::put_matrix(out, p->value);
    out += "\n";
  }
  out += "adam " + std::to_string(ck.adam.step);
  for (double v : {ck.adam.lr, ck.adam.beta1, ck.adam.beta2, ck.adam.eps}) detail::put_hex(out, v);
  out += "\n";
  for (std::size_t i = 0; i < ck.adam.first_moment.size(); ++i) {
    out += "adam_m " + std::to_string(i);
    detail::put_matrix(out, ck.adam.first_moment[i]);
    out += "\nadam_v " + std::to_string(i);
    detail::put_matrix(out, ck.adam.second_moment[i]);
    out += "\n";
  }
  std::ostringstream h;
  h << std::hex << fnv1a(out);
  out += "checksum " + h.str() + "\n";
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& text) {
  const auto pos = text.rfind("checksum ");
  if (pos == std::string::npos) throw IntegrityError("checkpoint: missing checksum");
  {
    std::istringstream tail(text.substr(pos + 9));
    std::uint64_t stored = 0;
    tail >> std::hex >> stored;
    if (!tail || stored != fnv1a(std::string_view(text).substr(0, pos))) {
      throw IntegrityError("checkpoint: checksum mismatch");
    }
  }
  std::istringstream in(text.substr(0, pos));
  std::string line;
  if (!std::getline(in, line) || line != "milal-checkpoint 1") throw IntegrityError("checkpoint: bad header");

  Checkpoint ck;
  std::vector<std::pair<std::string, Matrix>> params;
  RowVector mean, var;
  std::vector<Matrix> m1, m2;
  std::string tag;
  while (in >> tag) {
    if (tag == "epochs_done") {
      in >> ck.epochs_done;
    } else if (tag == "config") {
      std::string kv;
      in >> kv;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw IntegrityError("checkpoint: bad config entry '" + kv + "'");
      ck.config.set(kv.substr(0, eq), kv.substr(eq + 1));
    } else if (tag == "running_mean" || tag == "running_var") {
      Eigen::Index n = 0;
      in >> n;
      RowVector v(n);
      for (Eigen::Index i = 0; i < n; ++i) v(i) = detail::get_hex(in, tag);
      (tag == "running_mean" ? mean : var) = std::move(v);
    } else if (tag == "param") {
      std::string name;
      in >> name;
      params.emplace_back(name, detail::get_matrix(in, name));
    } else if (tag == "adam") {
      in >> ck.adam.step;
      ck.adam.lr = detail::get_hex(in, "adam");
      ck.adam.beta1 = detail::get_hex(in, "adam");
      ck.adam.beta2 = detail::get_hex(in, "adam");
      ck.adam.eps = detail::get_hex(in, "adam");
    } else if (tag == "adam_m" || tag == "adam_v") {
      std::size_t idx = 0;
      in >> idx;
      auto& dst = tag == "adam_m" ? m1 : m2;
      if (idx != dst.size()) throw IntegrityError("checkpoint: optimizer moments out of order");
      dst.push_back(detail::get_matrix(in, tag));
    } else {
      throw IntegrityError("checkpoint: unknown record '" + tag + "'");
    }
    if (!in) throw IntegrityError("checkpoint: truncated record '" + tag + "'");
  }

  ck.model = MilModel(ck.config.model, ck.config.variant, 0);
  auto targets = ck.model.parameters();
  if (targets.size() != params.size()) {
    throw IntegrityError("checkpoint: expected " + std::to_string(targets.size()) + " parameters, found " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i]->name != params[i].first || targets[i]->value.rows() != params[i].second.rows() ||
        targets[i]->value.cols() != params[i].second.cols()) {
      throw IntegrityError("checkpoint: parameter '" + params[i].first + "' does not match the architecture");
    }
    targets[i]->value = std::move(params[i].second);
  }
  ck.model.set_running_stats(std::move(mean), std::move(var));
  if (m1.size() != m2.size() || (!m1.empty() && m1.size() != targets.size())) {
    throw IntegrityError("checkpoint: optimizer state does not match the parameter list");
  }
  ck.adam.first_moment = std::move(m1);
  ck.adam.second_moment = std::move(m2);
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IntegrityError("cannot write checkpoint '" + path.string() + "'");
  f << encode_checkpoint(ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IntegrityError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace milal
