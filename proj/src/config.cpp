#include "issnet/config.hpp"

#include <cstdio>
#include <fstream>

#include "issnet/errors.hpp"

namespace issnet {

namespace {

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::tanh:
      return "tanh";
    case Activation::relu:
      return "relu";
    case Activation::softplus:
      return "softplus";
    case Activation::sigmoid:
      return "sigmoid";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ArgumentError("unknown activation '" + s + "'");
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::naive:
      return "naive";
    case Variant::momentum:
      return "momentum";
    case Variant::momentum_weight_decay:
      return "momentum_weight_decay";
    case Variant::magnitude_scaled:
      return "magnitude_scaled";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "naive") return Variant::naive;
  if (s == "momentum") return Variant::momentum;
  if (s == "momentum_weight_decay") return Variant::momentum_weight_decay;
  if (s == "magnitude_scaled") return Variant::magnitude_scaled;
  throw ArgumentError("unknown optimizer variant '" + s + "'");
}

Json layer_json(const LayerSpec& layer) {
  return std::visit(
      [](const auto& k) -> Json {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, DenseSpec>) {
          return {{"type", "dense"}, {"in", k.in}, {"out", k.out}, {"bias", k.bias}};
        } else if constexpr (std::is_same_v<K, ConvSpec>) {
          return {{"type", "conv"},       {"in_channels", k.in_channels}, {"out_channels", k.out_channels},
                  {"kernel", k.kernel},   {"stride", k.stride},           {"padding", k.padding},
                  {"bias", k.bias}};
        } else if constexpr (std::is_same_v<K, ActivationSpec>) {
          return {{"type", "activation"}, {"fn", activation_name(k.fn)}};
        } else if constexpr (std::is_same_v<K, PoolSpec>) {
          return {{"type", k.kind == PoolKind::max ? "max_pool" : "avg_pool"}, {"window", k.window}};
        } else if constexpr (std::is_same_v<K, FlattenSpec>) {
          return {{"type", "flatten"}};
        } else {
          Json inner = Json::array();
          for (const LayerSpec& l : k.inner) inner.push_back(layer_json(l));
          return {{"type", "residual"}, {"inner", inner}};
        }
      },
      layer.kind);
}

LayerSpec layer_from_json(const Json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "dense") return LayerSpec::dense(j.at("in"), j.at("out"), j.value("bias", true));
  if (type == "conv")
    return LayerSpec::conv(j.at("in_channels"), j.at("out_channels"), j.value("kernel", std::size_t{3}),
                           j.value("stride", std::size_t{1}), j.value("padding", std::size_t{0}), j.value("bias", true));
  if (type == "activation") return LayerSpec::activation(parse_activation(j.at("fn")));
  if (type == "max_pool") return LayerSpec::max_pool(j.value("window", std::size_t{2}));
  if (type == "avg_pool") return LayerSpec::avg_pool(j.value("window", std::size_t{2}));
  if (type == "flatten") return LayerSpec::flatten();
  if (type == "residual") {
    std::vector<LayerSpec> inner;
    for (const Json& l : j.at("inner")) inner.push_back(layer_from_json(l));
    return LayerSpec::residual(std::move(inner));
  }
  throw ArgumentError("unknown layer type '" + type + "'");
}

NetworkSpec default_network() {
  return {{784},
          {LayerSpec::dense(784, 128), LayerSpec::activation(Activation::relu), LayerSpec::dense(128, 10)},
          LossKind::softmax_cross_entropy};
}

// Overlays `user` onto `base`, rejecting keys the base does not know.
// Subtrees listed in `replace` are taken from the user verbatim.
void overlay(Json& base, const Json& user, const std::string& prefix) {
  if (!user.is_object()) throw ArgumentError("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ArgumentError("unknown config key '" + path + "'");
    Json& slot = base[key];
    const bool verbatim = path == "network" || path == "checkpoint_epochs" || slot.is_null();
    if (slot.is_object() && value.is_object() && !verbatim)
      overlay(slot, value, path);
    else
      slot = value;
  }
}

}  // namespace

std::string task_name(Task t) {
  switch (t) {
    case Task::train:
      return "train";
    case Task::prune:
      return "prune";
    case Task::ticket:
      return "ticket";
    case Task::grow:
      return "grow";
    case Task::diagnose:
      return "diagnose";
    case Task::export_plots:
      return "export";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  for (Task t : {Task::train, Task::prune, Task::ticket, Task::grow, Task::diagnose, Task::export_plots})
    if (task_name(t) == s) return t;
  throw ArgumentError("unknown task '" + s + "'");
}

std::string mask_level_name(MaskLevel l) {
  return l == MaskLevel::weight ? "weight" : l == MaskLevel::filter ? "filter" : "layer";
}

MaskLevel parse_mask_level(const std::string& s) {
  if (s == "weight") return MaskLevel::weight;
  if (s == "filter") return MaskLevel::filter;
  if (s == "layer") return MaskLevel::layer;
  throw ArgumentError("unknown mask level '" + s + "'");
}

Json to_json(const NetworkSpec& net) {
  Json layers = Json::array();
  for (const LayerSpec& l : net.layers) layers.push_back(layer_json(l));
  return {{"input", net.input},
          {"loss", net.loss == LossKind::mse ? "mse" : "softmax_cross_entropy"},
          {"layers", layers}};
}

NetworkSpec network_from_json(const Json& j) {
  try {
    NetworkSpec net;
    net.input = j.at("input").get<Shape>();
    const std::string loss = j.value("loss", std::string("softmax_cross_entropy"));
    if (loss == "mse")
      net.loss = LossKind::mse;
    else if (loss == "softmax_cross_entropy")
      net.loss = LossKind::softmax_cross_entropy;
    else
      throw ArgumentError("unknown loss '" + loss + "'");
    for (const Json& l : j.at("layers")) net.layers.push_back(layer_from_json(l));
    return net;
  } catch (const Json::exception& e) {
    throw ArgumentError(std::string("network spec: ") + e.what());
  }
}

Json to_json(const OptimizerConfig& cfg) {
  return {{"variant", variant_name(cfg.variant)},
          {"kappa", cfg.kappa},
          {"nu", cfg.nu},
          {"alpha", {{"initial", cfg.alpha.initial}, {"factor", cfg.alpha.factor}, {"every", cfg.alpha.every}}},
          {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},
          {"beta_floor", cfg.beta_floor}};
}

Json to_json(const GrowthPolicy& p) {
  return {{"period", p.period},
          {"threshold", p.threshold},
          {"rule", p.rule == GrowthRule::double_width ? "double" : "fixed"},
          {"increment", p.increment},
          {"max_width", p.max_width},
          {"post_epochs", p.post_epochs},
          {"rate_factor", p.rate_factor},
          {"plateau_tolerance", p.plateau_tolerance}};
}

Json to_json(const std::optional<PenaltySpec>& p) {
  if (!p) return nullptr;
  return {{"kind", p->kind == PenaltyKind::lasso ? "lasso" : "group_lasso"}, {"lambda", p->lambda}};
}

std::optional<PenaltySpec> penalty_from_json(const Json& j) {
  if (j.is_null()) return std::nullopt;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "lasso" && kind != "group_lasso") throw FormatError("unknown penalty kind '" + kind + "'");
  return PenaltySpec{kind == "lasso" ? PenaltyKind::lasso : PenaltyKind::group_lasso, j.at("lambda").get<double>()};
}

Json to_json(const ExperimentConfig& c) {
  Json checkpoints = Json::array();
  for (std::size_t e : c.checkpoint_epochs) checkpoints.push_back(e);
  return {
      {"task", task_name(c.task)},
      {"seed", c.seed},
      {"out", c.out.string()},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"dataset",
       {{"kind", c.dataset.kind},
        {"dir", c.dataset.dir.string()},
        {"layout", c.dataset.layout},
        {"train_limit", c.dataset.train_limit},
        {"test_limit", c.dataset.test_limit},
        {"n", c.dataset.n},
        {"d", c.dataset.d},
        {"s", c.dataset.s},
        {"sigma", c.dataset.sigma},
        {"test_fraction", c.dataset.test_fraction}}},
      {"network", to_json(c.network)},
      {"trainer", c.trainer},
      {"optimizer", to_json(c.optimizer)},
      {"sgd", {{"lr", c.sgd.lr}, {"momentum", c.sgd.momentum}, {"weight_decay", c.sgd.weight_decay}}},
      {"lambda", c.lambda},
      {"growth", c.growth ? to_json(*c.growth) : Json(nullptr)},
      {"grow_epochs", c.grow_epochs},
      {"checkpoint_epochs", checkpoints},
      {"checkpoint_every_epoch", c.checkpoint_every_epoch},
      {"checkpoint_f32", c.checkpoint_f32},
      {"path_detail_limit", c.path_detail_limit},
      {"ticket",
       {{"epoch", c.ticket.epoch},
        {"level", mask_level_name(c.ticket.level)},
        {"source", c.ticket.source.string()},
        {"retrain_epochs", c.ticket.retrain_epochs},
        {"init", c.ticket.init}}},
      {"prune",
       {{"checkpoint", c.prune.checkpoint.string()},
        {"level", mask_level_name(c.prune.level)},
        {"remove_layers", c.prune.remove_layers},
        {"finetune_epochs", c.prune.finetune_epochs}}},
      {"diagnose",
       {{"problem", c.diagnose.problem},
        {"n", c.diagnose.n},
        {"d", c.diagnose.d},
        {"steps", c.diagnose.steps},
        {"step_fraction", c.diagnose.step_fraction},
        {"lambda", c.diagnose.lambda},
        {"lip_samples", c.diagnose.lip_samples}}},
      {"log", c.log.string()},
  };
}

ExperimentConfig config_from_json(const Json& user) {
  ExperimentConfig c;
  c.network = default_network();
  Json j = to_json(c);
  overlay(j, user, "");
  if (j["growth"].is_object()) {
    Json g = to_json(GrowthPolicy{});
    overlay(g, j["growth"], "growth");
    j["growth"] = g;
  }
  try {
    c.task = parse_task(j.at("task"));
    c.seed = j.at("seed").get<std::uint64_t>();
    c.out = j.at("out").get<std::string>();
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    const Json& d = j.at("dataset");
    c.dataset.kind = d.at("kind");
    c.dataset.dir = d.at("dir").get<std::string>();
    c.dataset.layout = d.at("layout");
    c.dataset.train_limit = d.at("train_limit");
    c.dataset.test_limit = d.at("test_limit");
    c.dataset.n = d.at("n");
    c.dataset.d = d.at("d");
    c.dataset.s = d.at("s");
    c.dataset.sigma = d.at("sigma");
    c.dataset.test_fraction = d.at("test_fraction");
    c.network = network_from_json(j.at("network"));
    c.trainer = j.at("trainer");
    const Json& o = j.at("optimizer");
    c.optimizer.variant = parse_variant(o.at("variant"));
    c.optimizer.kappa = o.at("kappa");
    c.optimizer.nu = o.at("nu");
    c.optimizer.alpha.initial = o.at("alpha").at("initial");
    c.optimizer.alpha.factor = o.at("alpha").at("factor");
    c.optimizer.alpha.every = o.at("alpha").at("every");
    c.optimizer.momentum = o.at("momentum");
    c.optimizer.weight_decay = o.at("weight_decay");
    c.optimizer.beta_floor = o.at("beta_floor");
    const Json& s = j.at("sgd");
    c.sgd.lr = s.at("lr");
    c.sgd.momentum = s.at("momentum");
    c.sgd.weight_decay = s.at("weight_decay");
    c.lambda = j.at("lambda");
    if (const Json& g = j.at("growth"); !g.is_null()) {
      GrowthPolicy p;
      p.period = g.at("period");
      p.threshold = g.at("threshold");
      const std::string rule = g.at("rule");
      if (rule != "double" && rule != "fixed") throw ArgumentError("unknown growth rule '" + rule + "'");
      p.rule = rule == "double" ? GrowthRule::double_width : GrowthRule::fixed_increment;
      p.increment = g.at("increment");
      p.max_width = g.at("max_width");
      p.post_epochs = g.at("post_epochs");
      p.rate_factor = g.at("rate_factor");
      p.plateau_tolerance = g.at("plateau_tolerance");
      c.growth = p;
    }
    c.grow_epochs = j.at("grow_epochs");
    c.checkpoint_epochs = j.at("checkpoint_epochs").get<std::vector<std::size_t>>();
    c.checkpoint_every_epoch = j.at("checkpoint_every_epoch");
    c.checkpoint_f32 = j.at("checkpoint_f32");
    c.path_detail_limit = j.at("path_detail_limit");
    const Json& t = j.at("ticket");
    c.ticket.epoch = t.at("epoch");
    c.ticket.level = parse_mask_level(t.at("level"));
    c.ticket.source = t.at("source").get<std::string>();
    c.ticket.retrain_epochs = t.at("retrain_epochs");
    c.ticket.init = t.at("init");
    const Json& p = j.at("prune");
    c.prune.checkpoint = p.at("checkpoint").get<std::string>();
    c.prune.level = parse_mask_level(p.at("level"));
    c.prune.remove_layers = p.at("remove_layers");
    c.prune.finetune_epochs = p.at("finetune_epochs");
    const Json& g = j.at("diagnose");
    c.diagnose.problem = g.at("problem");
    c.diagnose.n = g.at("n");
    c.diagnose.d = g.at("d");
    c.diagnose.steps = g.at("steps");
    c.diagnose.step_fraction = g.at("step_fraction");
    c.diagnose.lambda = g.at("lambda");
    c.diagnose.lip_samples = g.at("lip_samples");
    c.log = j.at("log").get<std::string>();
  } catch (const Json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  if (batch_size == 0) throw ArgumentError("batch_size must be positive");
  if (trainer != "dessilbi" && trainer != "sgd") throw ArgumentError("trainer must be 'dessilbi' or 'sgd'");
  if (dataset.kind != "mnist" && dataset.kind != "synthetic")
    throw ArgumentError("dataset.kind must be 'mnist' or 'synthetic'");
  if (dataset.layout != "flat" && dataset.layout != "chw") throw ArgumentError("dataset.layout must be flat or chw");
  if (!(lambda >= 0.0)) throw ArgumentError("lambda must be non-negative");
  if (ticket.init != "early" && ticket.init != "initial") throw ArgumentError("ticket.init must be early or initial");
  if (diagnose.problem != "least_squares" && diagnose.problem != "network")
    throw ArgumentError("diagnose.problem must be least_squares or network");
  if (!(diagnose.step_fraction > 0.0)) throw ArgumentError("diagnose.step_fraction must be positive");
  optimizer.validate();
  if (growth) growth->validate();
  output_shape(network);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ArgumentError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void set_path(Json& j, const std::string& dotted, const std::string& value) {
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ArgumentError("bad config path '" + dotted + "'");
    if (!node->is_object() && !node->is_null()) throw ArgumentError("config path '" + dotted + "' crosses a value");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  Json parsed = Json::parse(value, nullptr, false);
  *node = parsed.is_discarded() ? Json(value) : parsed;
}

std::string config_hash(const Json& resolved) {
  const std::string text = resolved.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace issnet
