#pragma once

#include "crate/config.hpp"
#include "crate/container.hpp"
#include "crate/model.hpp"
#include "crate/optim.hpp"

#include <string>
#include <unordered_map>

namespace crate {

struct TrainCursor {
  std::int64_t step = 0;  // completed optimizer steps
  int epoch = 0;
  int step_in_epoch = 0;
  std::int64_t opt_step = 0;
};

inline json to_json(const TrainCursor& c) {
  return json{{"step", c.step},
              {"epoch", c.epoch},
              {"step_in_epoch", c.step_in_epoch},
              {"opt_step", c.opt_step}};
}

inline TrainCursor cursor_from_json(const json& j) {
  TrainCursor c;
  c.step = j.value("step", std::int64_t{0});
  c.epoch = j.value("epoch", 0);
  c.step_in_epoch = j.value("step_in_epoch", 0);
  c.opt_step = j.value("opt_step", std::int64_t{0});
  return c;
}

template <class S>
std::string serialize_checkpoint(const RunConfig& run, const ModelState<S>& model,
                                 const OptState<S>& opt, const TrainCursor& cursor,
                                 const ChannelStats* stats) {
  json header;
  header["kind"] = "checkpoint";
  header["precision"] = precision_name<S>();
  header["run"] = to_json(run);
  header["cursor"] = to_json(cursor);
  header["tool_version"] = kToolVersion;
  if (stats && !stats->mean.empty()) {
    header["channel_stats"] = json{{"mean", stats->mean}, {"std", stats->stdev}};
  } else {
    header["channel_stats"] = nullptr;
  }

  std::vector<TensorRecord> tensors;
  model.for_each_tensor([&](const std::string& name, const Mat<S>& m) {
    tensors.push_back(to_record(name, m));
  });
  std::size_t i = 0;
  model.for_each_tensor([&](const std::string& name, const Mat<S>&) {
    tensors.push_back(to_record("opt.m." + name, opt.m[i]));
    tensors.push_back(to_record("opt.v." + name, opt.v[i]));
    ++i;
  });
  return serialize_container(header, tensors);
}

template <class S>
void save_checkpoint(const std::string& path, const RunConfig& run,
                     const ModelState<S>& model, const OptState<S>& opt,
                     const TrainCursor& cursor, const ChannelStats* stats = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  const std::string bytes = serialize_checkpoint(run, model, opt, cursor, stats);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to checkpoint " + path);
}

template <class S>
struct LoadedCheckpoint {
  RunConfig run;
  ModelState<S> model;
  OptState<S> opt;
  TrainCursor cursor;
  ChannelStats stats;
};

/// Peek at the stored precision so the caller can dispatch the scalar type.
inline std::string checkpoint_precision(const std::string& path) {
  const Container c = read_container(path);
  if (c.header.value("kind", "") != "checkpoint")
    throw DataError("not a checkpoint file: " + path);
  return c.header.value("precision", "f32");
}

template <class S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  const Container c = read_container(path);
  if (c.header.value("kind", "") != "checkpoint")
    throw DataError("not a checkpoint file: " + path);
  if (c.header.value("precision", "") != precision_name<S>())
    throw DataError("checkpoint precision is " + c.header.value("precision", "?") +
                    ", expected " + precision_name<S>());

  LoadedCheckpoint<S> out;
  out.run = run_from_json(c.header.at("run"));
  out.run.validate();
  out.cursor = cursor_from_json(c.header.at("cursor"));
  if (c.header.contains("channel_stats") && !c.header["channel_stats"].is_null()) {
    out.stats.mean = c.header["channel_stats"]["mean"].get<std::vector<double>>();
    out.stats.stdev = c.header["channel_stats"]["std"].get<std::vector<double>>();
  }

  std::unordered_map<std::string, const TensorRecord*> by_name;
  for (const auto& t : c.tensors) by_name[t.name] = &t;

  out.model = init<S>(out.run.model, RngState(0));  // shapes only; overwritten below
  std::size_t expected = 0;
  out.model.for_each_tensor([&](const std::string& name, Mat<S>& m) {
    ++expected;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint missing tensor " + name);
    Mat<S> loaded = record_to_mat<S>(*it->second);
    require_shape(loaded.rows() == m.rows() && loaded.cols() == m.cols(),
                  "checkpoint tensor shape mismatch: " + name);
    m = std::move(loaded);
  });
  out.opt.step = out.cursor.opt_step;
  out.model.for_each_tensor([&](const std::string& name, const Mat<S>&) {
    auto mit = by_name.find("opt.m." + name);
    auto vit = by_name.find("opt.v." + name);
    if (mit == by_name.end() || vit == by_name.end())
      throw DataError("checkpoint missing optimizer state for " + name);
    out.opt.m.push_back(record_to_mat<S>(*mit->second));
    out.opt.v.push_back(record_to_mat<S>(*vit->second));
  });
  if (c.tensors.size() != expected * 3)
    throw DataError("checkpoint holds unexpected extra tensors");
  return out;
}

}  // namespace crate
