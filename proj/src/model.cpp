#include "ags/model.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace ags {

void NetworkConfig::validate() const {
  auto positive = [](Index v, const char* what) {
    if (v <= 0) throw std::invalid_argument(std::string("network: ") + what + " must be positive");
  };
  positive(input_dim, "input_dim");
  positive(kernel, "kernel");
  positive(pool_stride, "pool_stride");
  positive(lstm_layers, "lstm_layers");
  positive(hidden, "hidden");
  for (Index c : conv_channels) positive(c, "conv channel count");
  if (output_size < 2) throw std::invalid_argument("network: output_size must be at least 2 (blank plus one symbol)");
  if (!(lstm_dropout >= 0.0 && lstm_dropout < 1.0)) throw std::invalid_argument("network: lstm_dropout must lie in [0, 1)");
}

Index NetworkConfig::frames_after_frontend(Index frames) const {
  for (std::size_t i = 0; i < conv_channels.size(); ++i) {
    frames = conv_output_size(frames, kernel, 1, kernel / 2);
    frames = pooled_length(frames, pool_stride);
  }
  return frames;
}

void AdaptConfig::validate(const NetworkConfig& net) const {
  if (method == AdaptMethod::none || method == AdaptMethod::ssnn) {
    if (method == AdaptMethod::ssnn && ssnn_hidden <= 0) throw std::invalid_argument("adapt: ssnn_hidden must be positive");
    return;
  }
  if (layers.empty()) throw std::invalid_argument("adapt: no layers selected for " + to_string(method));
  for (Index l : layers)
    if (l < 1 || l > net.lstm_layers)
      throw std::invalid_argument("adapt: layer index " + std::to_string(l) + " outside 1.." +
                                  std::to_string(net.lstm_layers));
  if (method == AdaptMethod::ags) {
    if (attention_dim <= 0) throw std::invalid_argument("adapt: d_a must be positive");
    if (heads < 1 || attention_dim % heads != 0)
      throw std::invalid_argument("adapt: heads=" + std::to_string(heads) + " must divide d_a=" + std::to_string(attention_dim));
  }
  for (double r : {ags_dropout, lhuc_dropout, ssnn_dropout})
    if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument("adapt: dropout rates must lie in [0, 1)");
}

bool AdaptConfig::adapts(Index layer) const {
  if (method != AdaptMethod::ags && method != AdaptMethod::lhuc) return false;
  return std::find(layers.begin(), layers.end(), layer) != layers.end();
}

std::string to_string(AdaptMethod method) {
  switch (method) {
    case AdaptMethod::none: return "none";
    case AdaptMethod::ags: return "ags";
    case AdaptMethod::lhuc: return "lhuc";
    case AdaptMethod::ssnn: return "ssnn";
  }
  return "?";
}

AdaptMethod parse_adapt_method(const std::string& text) {
  if (text == "none" || text == "baseline") return AdaptMethod::none;
  if (text == "ags") return AdaptMethod::ags;
  if (text == "lhuc") return AdaptMethod::lhuc;
  if (text == "ssnn") return AdaptMethod::ssnn;
  throw std::invalid_argument("unknown adaptation method '" + text + "'");
}

std::string to_string(AgsInput input) { return input == AgsInput::transformed ? "transformed" : "features"; }

AgsInput parse_ags_input(const std::string& text) {
  if (text == "transformed") return AgsInput::transformed;
  if (text == "features") return AgsInput::features;
  throw std::invalid_argument("unknown AGS input source '" + text + "'");
}

std::string architecture_text(const NetworkConfig& net, const AdaptConfig& adapt) {
  std::ostringstream os;
  os << "input_dim=" << net.input_dim << ";conv=";
  for (Index c : net.conv_channels) os << c << ',';
  os << ";kernel=" << net.kernel << ";pool=" << net.pool_stride << ";lstm=" << net.lstm_layers
     << ";hidden=" << net.hidden << ";output=" << net.output_size << ";method=" << to_string(adapt.method);
  if (adapt.method == AdaptMethod::ags || adapt.method == AdaptMethod::lhuc) {
    os << ";layers=";
    for (Index l : adapt.layers) os << l << ',';
  }
  if (adapt.method == AdaptMethod::ags)
    os << ";d_a=" << adapt.attention_dim << ";heads=" << adapt.heads << ";ags_input=" << to_string(adapt.ags_input);
  if (adapt.method == AdaptMethod::ssnn) os << ";ssnn_hidden=" << adapt.ssnn_hidden;
  return os.str();
}

std::uint64_t architecture_digest(const NetworkConfig& net, const AdaptConfig& adapt) {
  // FNV-1a
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : architecture_text(net, adapt)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Index ags_extra_parameters(const NetworkConfig& net, const AdaptConfig& adapt) {
  if (adapt.method != AdaptMethod::ags) return 0;
  const Index d_f = adapt.ags_input == AgsInput::transformed ? net.frontend_width() : net.input_dim;
  const Index d_h = 2 * net.hidden;
  const Index d_a = adapt.attention_dim;
  return static_cast<Index>(adapt.layers.size()) * (3 * d_a * d_f + d_h * d_a + d_h);
}

template <typename Scalar>
AcousticModel<Scalar>::AcousticModel(NetworkConfig net, AdaptConfig adapt, std::uint64_t seed)
    : net_(std::move(net)), adapt_(std::move(adapt)) {
  net_.validate();
  adapt_.validate(net_);
  Rng main_rng(seed);
  Rng adapt_rng(seed ^ 0x9e3779b97f4a7c15ULL);

  Index channels = 1;
  for (Index c : net_.conv_channels) {
    convs.push_back(Conv2dLayer<Scalar>::init(channels, c, net_.kernel, net_.kernel, main_rng, 1, net_.kernel / 2));
    channels = c;
  }
  Index width = net_.frontend_width();
  for (Index l = 0; l < net_.lstm_layers; ++l) {
    lstms.push_back(BiLstmLayer<Scalar>::init(width, net_.hidden, main_rng));
    width = 2 * net_.hidden;
  }
  output = DenseLayer<Scalar>::init(width, net_.output_size, Activation::linear, main_rng);

  ags.resize(static_cast<std::size_t>(net_.lstm_layers));
  lhuc.resize(static_cast<std::size_t>(net_.lstm_layers));
  const Index ags_width = adapt_.ags_input == AgsInput::transformed ? net_.frontend_width() : net_.input_dim;
  for (Index l = 0; l < net_.lstm_layers; ++l) {
    if (!adapt_.adapts(l + 1)) continue;
    if (adapt_.method == AdaptMethod::ags)
      ags[static_cast<std::size_t>(l)] =
          AgsLayer<Scalar>::init(ags_width, adapt_.attention_dim, 2 * net_.hidden, adapt_.heads, adapt_rng);
    else
      lhuc[static_cast<std::size_t>(l)] = LhucParams<Scalar>::init(2 * net_.hidden);
  }
  if (adapt_.method == AdaptMethod::ssnn) ssnn = SsnnNetwork<Scalar>::init(net_.input_dim, adapt_.ssnn_hidden, adapt_rng);
}

template <typename Scalar>
ForwardTrace<Scalar> AcousticModel<Scalar>::trace(const Var<Scalar>& features, Mode mode, Rng& rng) const {
  if (features.cols() != net_.input_dim)
    throw DimensionError("model: features " + shape_string(features.shape()) + " but input_dim=" +
                         std::to_string(net_.input_dim));
  ForwardTrace<Scalar> tr;
  Var<Scalar> x = features;
  if (ssnn) x = ssnn_shift(*ssnn, x, adapt_.ssnn_dropout, mode, rng);

  const Index frames = x.rows();
  Var<Scalar> volume = reshape(x, {1, frames, net_.input_dim});
  for (const auto& conv : convs) volume = maxpool_time(relu(conv2d_forward(conv, volume)), net_.pool_stride);
  tr.frontend = frames_from_channels(volume);

  if (adapt_.method == AdaptMethod::ags) {
    if (adapt_.ags_input == AgsInput::transformed) {
      tr.ags_source = tr.frontend;
    } else {
      Var<Scalar> pooled = reshape(features, {1, frames, net_.input_dim});
      for (std::size_t i = 0; i < convs.size(); ++i) pooled = maxpool_time(pooled, net_.pool_stride);
      tr.ags_source = frames_from_channels(pooled);
    }
  }

  Var<Scalar> h = tr.frontend;
  for (std::size_t l = 0; l < lstms.size(); ++l) {
    h = dropout(bilstm_forward(lstms[l], h), net_.lstm_dropout, mode, rng);
    if (ags[l]) {
      auto gate = multi_head_gate(*ags[l], tr.ags_source, adapt_.ags_dropout, mode, rng);
      tr.gates.push_back(gate.values);
      h = apply_gate(gate, h);
    } else if (lhuc[l]) {
      h = lhuc_apply(*lhuc[l], h, adapt_.lhuc_dropout, mode, rng);
    }
  }
  tr.logits = dense_forward(output, h);
  return tr;
}

template <typename Scalar>
std::vector<NamedParam<Scalar>> AcousticModel<Scalar>::parameters() const {
  std::vector<NamedParam<Scalar>> out;
  auto add = [&](std::string name, const Var<Scalar>& v) { out.push_back({std::move(name), v}); };
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const std::string p = "conv" + std::to_string(i + 1);
    add(p + ".kernel", convs[i].kernel);
    add(p + ".bias", convs[i].bias);
  }
  for (std::size_t i = 0; i < lstms.size(); ++i) {
    const std::string p = "lstm" + std::to_string(i + 1);
    for (const auto& [dir, cell] : {std::pair{".fwd", &lstms[i].fwd}, std::pair{".bwd", &lstms[i].bwd}}) {
      add(p + dir + ".w_ih", cell->w_ih);
      add(p + dir + ".w_hh", cell->w_hh);
      add(p + dir + ".bias", cell->bias);
    }
  }
  add("output.weight", output.weight);
  add("output.bias", output.bias);
  for (std::size_t i = 0; i < ags.size(); ++i) {
    if (!ags[i]) continue;
    const std::string p = "ags" + std::to_string(i + 1);
    add(p + ".w_k", ags[i]->w_k);
    add(p + ".w_q", ags[i]->w_q);
    add(p + ".w_v", ags[i]->w_v);
    add(p + ".gate.weight", ags[i]->gate.weight);
    add(p + ".gate.bias", ags[i]->gate.bias);
  }
  for (std::size_t i = 0; i < lhuc.size(); ++i)
    if (lhuc[i]) add("lhuc" + std::to_string(i + 1) + ".r", lhuc[i]->r);
  if (ssnn) {
    add("ssnn.first.weight", ssnn->first.weight);
    add("ssnn.first.bias", ssnn->first.bias);
    add("ssnn.second.weight", ssnn->second.weight);
    add("ssnn.second.bias", ssnn->second.bias);
    add("ssnn.output.weight", ssnn->output.weight);
    add("ssnn.output.bias", ssnn->output.bias);
  }
  return out;
}

template <typename Scalar>
Index AcousticModel<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& p : parameters()) n += p.var.size();
  return n;
}

template <typename Scalar>
void copy_parameters(const AcousticModel<Scalar>& src, AcousticModel<Scalar>& dst) {
  auto from = src.parameters();
  auto to = dst.parameters();
  if (from.size() != to.size()) throw DimensionError("copy_parameters: models have different layouts");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].var.shape() != to[i].var.shape())
      throw DimensionError("copy_parameters: mismatch at " + from[i].name);
    to[i].var.mutable_value() = from[i].var.value();
  }
}

template <typename Scalar>
void copy_main_network(const AcousticModel<Scalar>& src, AcousticModel<Scalar>& dst) {
  auto is_main = [](const std::string& n) {
    return n.rfind("conv", 0) == 0 || n.rfind("lstm", 0) == 0 || n.rfind("output", 0) == 0;
  };
  std::vector<NamedParam<Scalar>> from, to;
  for (auto& p : src.parameters())
    if (is_main(p.name)) from.push_back(p);
  for (auto& p : dst.parameters())
    if (is_main(p.name)) to.push_back(p);
  if (from.size() != to.size()) throw DimensionError("copy_main_network: main networks differ");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].var.shape() != to[i].var.shape())
      throw DimensionError("copy_main_network: mismatch at " + from[i].name);
    to[i].var.mutable_value() = from[i].var.value();
  }
}

template class AcousticModel<float>;
template class AcousticModel<double>;
template void copy_parameters(const AcousticModel<float>&, AcousticModel<float>&);
template void copy_parameters(const AcousticModel<double>&, AcousticModel<double>&);
template void copy_main_network(const AcousticModel<float>&, AcousticModel<float>&);
template void copy_main_network(const AcousticModel<double>&, AcousticModel<double>&);

}  // namespace ags
