#pragma once

// CNN front end + stacked BiLSTM + CTC output layer, with optional
// AGS / LHUC / SSNN adaptation.

#include "ags/adapt.hpp"
#include "ags/layers.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ags {

struct NetworkConfig {
  Index input_dim = 36;
  std::vector<Index> conv_channels{8, 16};
  Index kernel = 3;
  Index pool_stride = 2;
  Index lstm_layers = 3;
  Index hidden = 32;      // per direction
  Index output_size = 11; // blank included
  double lstm_dropout = 0.3;

  void validate() const;
  /// Width of the flattened front-end output, i.e. the first LSTM's input.
  Index frontend_width() const { return conv_channels.empty() ? input_dim : conv_channels.back() * input_dim; }
  Index frames_after_frontend(Index frames) const;
};

enum class AdaptMethod { none, ags, lhuc, ssnn };
enum class AgsInput { transformed, features };

struct AdaptConfig {
  AdaptMethod method = AdaptMethod::none;
  std::vector<Index> layers{1, 2, 3};  // 1-based LSTM layer indices
  Index attention_dim = 32;
  Index heads = 1;
  AgsInput ags_input = AgsInput::transformed;
  double ags_dropout = 0.5;
  double lhuc_dropout = 0.3;
  double ssnn_dropout = 0.1;
  Index ssnn_hidden = 32;

  void validate(const NetworkConfig& net) const;
  bool adapts(Index layer) const;
};

std::string to_string(AdaptMethod method);
AdaptMethod parse_adapt_method(const std::string& text);
std::string to_string(AgsInput input);
AgsInput parse_ags_input(const std::string& text);

/// Canonical text of everything that fixes the parameter layout and the
/// forward function.
std::string architecture_text(const NetworkConfig& net, const AdaptConfig& adapt);
std::uint64_t architecture_digest(const NetworkConfig& net, const AdaptConfig& adapt);

/// Closed-form count of parameters AGS adds on top of the baseline.
Index ags_extra_parameters(const NetworkConfig& net, const AdaptConfig& adapt);

template <typename Scalar>
struct NamedParam {
  std::string name;
  Var<Scalar> var;
};

template <typename Scalar>
struct ForwardTrace {
  Var<Scalar> frontend;            // T' x frontend_width
  Var<Scalar> ags_source;          // what the AGS layers attend over
  std::vector<Var<Scalar>> gates;  // one per adapted layer, in layer order
  Var<Scalar> logits;              // T' x output_size
};

template <typename Scalar>
class AcousticModel {
 public:
  AcousticModel(NetworkConfig net, AdaptConfig adapt, std::uint64_t seed);
  // Parameters are shared handles, so a copy would alias the original.
  AcousticModel(const AcousticModel&) = delete;
  AcousticModel& operator=(const AcousticModel&) = delete;
  AcousticModel(AcousticModel&&) noexcept = default;
  AcousticModel& operator=(AcousticModel&&) noexcept = default;

  const NetworkConfig& network_config() const { return net_; }
  const AdaptConfig& adapt_config() const { return adapt_; }

  ForwardTrace<Scalar> trace(const Var<Scalar>& features, Mode mode, Rng& rng) const;

  /// Logits (pre-softmax) for a T x input_dim feature matrix.
  Var<Scalar> forward(const Var<Scalar>& features, Mode mode, Rng& rng) const {
    return trace(features, mode, rng).logits;
  }
  Matrix<Scalar> logits_eval(const Matrix<Scalar>& features) const {
    Rng unused;
    return forward(Var<Scalar>::leaf(features), Mode::eval, unused).value();
  }

  /// Every trainable tensor under a stable dotted name.
  std::vector<NamedParam<Scalar>> parameters() const;
  Index parameter_count() const;

  // Sub-modules are public so tests can set weights by hand.
  std::vector<Conv2dLayer<Scalar>> convs;
  std::vector<BiLstmLayer<Scalar>> lstms;
  DenseLayer<Scalar> output;
  std::vector<std::optional<AgsLayer<Scalar>>> ags;     // indexed by LSTM layer (0-based)
  std::vector<std::optional<LhucParams<Scalar>>> lhuc;  // indexed by LSTM layer (0-based)
  std::optional<SsnnNetwork<Scalar>> ssnn;

 private:
  NetworkConfig net_;
  AdaptConfig adapt_;
};

/// Main-network weights depend only on (net, seed); adapter weights come
/// from a separate stream, so models that differ only in adaptation share
/// their main network.
template <typename Scalar>
AcousticModel<Scalar> build_adapted_network(const NetworkConfig& net, const AdaptConfig& adapt, std::uint64_t seed) {
  return AcousticModel<Scalar>(net, adapt, seed);
}

/// Copies parameter values from `src` into `dst`. Layouts must match.
template <typename Scalar>
void copy_parameters(const AcousticModel<Scalar>& src, AcousticModel<Scalar>& dst);

/// Copies main-network weights (everything but adapters) from `src`.
template <typename Scalar>
void copy_main_network(const AcousticModel<Scalar>& src, AcousticModel<Scalar>& dst);

extern template class AcousticModel<float>;
extern template class AcousticModel<double>;

}  // namespace ags
