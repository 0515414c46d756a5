#pragma once

// Multilayer perceptrons in the roles used by the method: frozen source
// classifier, feature extractor, adaptive classifier, conditional generator,
// GAN discriminator and domain discriminator.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "sdda/autodiff.hpp"
#include "sdda/errors.hpp"
#include "sdda/random.hpp"
#include "sdda/tensor.hpp"

namespace sdda {

enum class Activation : std::uint8_t { Tanh = 0, Relu = 1 };

// How the last affine layer's output is read. The network always returns the
// pre-sigmoid value for SigmoidScalar so losses can use fused forms.
enum class Head : std::uint8_t {
    Logits = 0,        // class scores, no softmax
    SigmoidScalar = 1, // one logit read as a probability
    RawVector = 2,     // unbounded output
    Features = 3,      // output passes through one more activation
};

struct MlpSpec {
    std::vector<std::size_t> widths;       // input, hidden..., output
    std::vector<Activation> activations;   // one per hidden layer, plus one for a Features head
    Head head = Head::Logits;

    std::size_t layers() const { return widths.size() - 1; }
    std::size_t input_dim() const { return widths.front(); }
    std::size_t output_dim() const { return widths.back(); }

    void validate() const {
        if (widths.size() < 2) throw ContractError("mlp spec: need at least input and output widths");
        for (std::size_t w : widths) {
            if (w == 0) throw ContractError("mlp spec: widths must be positive");
        }
        const std::size_t expected = layers() - 1 + (head == Head::Features ? 1 : 0);
        if (activations.size() != expected) {
            throw ContractError("mlp spec: expected " + std::to_string(expected) + " activation tags, got "
                                + std::to_string(activations.size()));
        }
        if (head == Head::SigmoidScalar && output_dim() != 1) {
            throw ContractError("mlp spec: sigmoid head needs output width 1");
        }
    }

    bool operator==(const MlpSpec&) const = default;
};

// Uniform hidden stack: widths {in, h..., out} with one activation everywhere.
inline MlpSpec mlp_spec(std::vector<std::size_t> widths, Head head, Activation act = Activation::Tanh) {
    MlpSpec spec{std::move(widths), {}, head};
    const std::size_t n = spec.widths.size() < 2 ? 0 : spec.widths.size() - 2 + (head == Head::Features ? 1 : 0);
    spec.activations.assign(n, act);
    spec.validate();
    return spec;
}

struct MlpNetwork {
    MlpSpec spec;
    std::vector<Tensor> weights; // layer l: (widths[l], widths[l+1])
    std::vector<Tensor> biases;  // layer l: (widths[l+1])
    bool frozen = false;

    // Weight and bias of every layer, in layer order.
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(&weights[l]);
            out.push_back(&biases[l]);
        }
        return out;
    }

    void zero_grad() {
        for (Tensor* p : parameters()) p->zero_grad();
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
        return n;
    }
};

// FNV-1a over the raw bytes of every parameter value.
inline std::uint64_t parameter_hash(const MlpNetwork& net) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const std::vector<double>& v) {
        for (double d : v) {
            const auto bits = std::bit_cast<std::uint64_t>(d);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xffU;
                h *= 0x100000001b3ULL;
            }
        }
    };
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        mix(net.weights[l].values);
        mix(net.biases[l].values);
    }
    return h;
}

inline MlpNetwork init_mlp(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    MlpNetwork net{spec, {}, {}, false};
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        const std::size_t fan_in = spec.widths[l], fan_out = spec.widths[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Tensor w(Shape{fan_in, fan_out});
        for (double& v : w.values) v = rng.uniform(-bound, bound);
        net.weights.push_back(std::move(w));
        net.biases.emplace_back(Shape{fan_out});
    }
    return net;
}

// Whether forward() binds parameters as trainable leaves or as constants.
// Frozen networks are always recorded as constants.
enum class Binding { Trainable, Constant };

inline Var activate(Var x, Activation act) { return act == Activation::Tanh ? tanh(x) : relu(x); }

namespace detail {

// Parameters are bound to `trainable` when it is non-null, else recorded as constants.
inline Var forward_impl(const MlpNetwork& net, MlpNetwork* trainable, Var x) {
    const Tensor& in = x.tape->value(x);
    if (in.rank() != 2 || in.shape[1] != net.spec.input_dim()) {
        throw DimensionError("mlp forward: input " + shape_string(in.shape) + " but network expects width "
                             + std::to_string(net.spec.input_dim()));
    }
    Tape& tape = *x.tape;
    Var h = x;
    for (std::size_t l = 0; l < net.spec.layers(); ++l) {
        Var w = trainable ? tape.parameter(trainable->weights[l]) : tape.constant(Tensor(net.weights[l].shape, net.weights[l].values));
        Var b = trainable ? tape.parameter(trainable->biases[l]) : tape.constant(Tensor(net.biases[l].shape, net.biases[l].values));
        h = add(matmul(h, w), b);
        if (l + 1 < net.spec.layers() || net.spec.head == Head::Features) h = activate(h, net.spec.activations[l]);
    }
    return h;
}

} // namespace detail

// Records the network on the tape. Returns raw logits / pre-sigmoid values.
inline Var forward(MlpNetwork& net, Var x, Binding binding = Binding::Trainable) {
    const bool trainable = binding == Binding::Trainable && !net.frozen;
    return detail::forward_impl(net, trainable ? &net : nullptr, x);
}

inline Var forward(const MlpNetwork& net, Var x) { return detail::forward_impl(net, nullptr, x); }

// Forward pass outside any training step.
inline Tensor apply(const MlpNetwork& net, const Tensor& x) {
    Tape tape;
    Var out = forward(net, tape.constant(Tensor(x.shape, x.values)));
    return Tensor(tape.value(out).shape, tape.value(out).values);
}

// Raw class logits, one row per sample.
inline Tensor classify(const MlpNetwork& net, const Tensor& x) { return apply(net, x); }

// Latent noise and one-hot class codes for one generator batch.
struct GeneratorInput {
    Tensor z;      // (batch, d_z)
    Tensor onehot; // (batch, K)

    void validate() const {
        if (z.rank() != 2 || onehot.rank() != 2 || z.shape[0] != onehot.shape[0]) {
            throw DimensionError("generator input: z " + shape_string(z.shape) + " and one-hot "
                                 + shape_string(onehot.shape) + " disagree");
        }
        for (std::size_t r = 0; r < onehot.shape[0]; ++r) {
            int ones = 0;
            for (std::size_t c = 0; c < onehot.shape[1]; ++c) {
                const double v = onehot.at(r, c);
                if (v == 1.0) {
                    ++ones;
                } else if (v != 0.0) {
                    ones = -1;
                    break;
                }
            }
            if (ones != 1) throw ContractError("generator input: row " + std::to_string(r) + " is not one-hot");
        }
    }
};

inline Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
    Tensor out(Shape{labels.size(), num_classes});
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= num_classes) {
            throw ContractError("one_hot: label " + std::to_string(labels[r]) + " out of range");
        }
        out.at(r, static_cast<std::size_t>(labels[r])) = 1.0;
    }
    return out;
}

// Standard-normal z for the given labels.
inline GeneratorInput sample_generator_input(std::span<const int> labels, std::size_t num_classes,
                                             std::size_t latent_dim, Rng& rng) {
    Tensor z(Shape{labels.size(), latent_dim});
    for (double& v : z.values) v = rng.normal();
    return GeneratorInput{std::move(z), one_hot(labels, num_classes)};
}

namespace detail {

inline Var generator_input(const MlpNetwork& generator, Tape& tape, const GeneratorInput& input) {
    input.validate();
    const std::size_t width = input.z.shape[1] + input.onehot.shape[1];
    if (width != generator.spec.input_dim()) {
        throw DimensionError("generate: z width + classes = " + std::to_string(width) + " but generator expects "
                             + std::to_string(generator.spec.input_dim()));
    }
    return concat(tape.constant(Tensor(input.z.shape, input.z.values)),
                  tape.constant(Tensor(input.onehot.shape, input.onehot.values)));
}

} // namespace detail

// Records G(z, y) on the tape; z and the one-hot code are concatenated.
inline Var generate(MlpNetwork& generator, Tape& tape, const GeneratorInput& input,
                    Binding binding = Binding::Trainable) {
    return forward(generator, detail::generator_input(generator, tape, input), binding);
}

inline Var generate(const MlpNetwork& generator, Tape& tape, const GeneratorInput& input) {
    return forward(generator, detail::generator_input(generator, tape, input));
}

inline Tensor generate(const MlpNetwork& generator, const GeneratorInput& input) {
    Tape tape;
    Var out = generate(generator, tape, input);
    return Tensor(tape.value(out).shape, tape.value(out).values);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   magic      8 bytes  "SDDANET\0"
//   version    u32      kCheckpointVersion
//   frozen     u8
//   head       u8
//   n_widths   u32
//   widths     u32 x n_widths
//   n_acts     u32
//   acts       u8 x n_acts
//   per layer: weight (rows*cols f64), bias (cols f64)
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kCheckpointMagic{'S', 'D', 'D', 'A', 'N', 'E', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    const U bits = std::bit_cast<U>(v);
    for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffU));
}

class ByteReader {
public:
    explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

    template <class T>
    T get(const char* what) {
        using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
        if (pos_ + sizeof(T) > bytes_.size()) throw CorruptionError(std::string("checkpoint truncated while reading ") + what);
        U bits = 0;
        for (std::size_t b = 0; b < sizeof(T); ++b) {
            bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        }
        pos_ += sizeof(T);
        return std::bit_cast<T>(bits);
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string serialize_checkpoint(const MlpNetwork& net) {
    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint8_t>(out, net.frozen ? 1 : 0);
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(net.spec.head));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.spec.widths.size()));
    for (std::size_t w : net.spec.widths) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.spec.activations.size()));
    for (Activation a : net.spec.activations) detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(a));
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        for (double v : net.weights[l].values) detail::put_le<double>(out, v);
        for (double v : net.biases[l].values) detail::put_le<double>(out, v);
    }
    return out;
}

inline MlpNetwork deserialize_checkpoint(std::string bytes) {
    if (bytes.size() < kCheckpointMagic.size()) throw CorruptionError("checkpoint truncated in header");
    if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
        throw CorruptionError("checkpoint: bad magic");
    }
    detail::ByteReader in(bytes.substr(kCheckpointMagic.size()));
    const auto version = in.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw VersionError("checkpoint: format version " + std::to_string(version) + ", expected "
                           + std::to_string(kCheckpointVersion));
    }
    MlpSpec spec;
    const bool frozen = in.get<std::uint8_t>("frozen flag") != 0;
    const auto head = in.get<std::uint8_t>("head");
    if (head > static_cast<std::uint8_t>(Head::Features)) throw CorruptionError("checkpoint: unknown head tag");
    spec.head = static_cast<Head>(head);
    const auto n_widths = in.get<std::uint32_t>("width count");
    if (n_widths < 2 || n_widths > 1024) throw CorruptionError("checkpoint: implausible width count");
    for (std::uint32_t i = 0; i < n_widths; ++i) spec.widths.push_back(in.get<std::uint32_t>("widths"));
    const auto n_acts = in.get<std::uint32_t>("activation count");
    if (n_acts > 1024) throw CorruptionError("checkpoint: implausible activation count");
    for (std::uint32_t i = 0; i < n_acts; ++i) {
        const auto a = in.get<std::uint8_t>("activations");
        if (a > static_cast<std::uint8_t>(Activation::Relu)) throw CorruptionError("checkpoint: unknown activation tag");
        spec.activations.push_back(static_cast<Activation>(a));
    }
    try {
        spec.validate();
    } catch (const ContractError& e) {
        throw CorruptionError(std::string("checkpoint: invalid spec: ") + e.what());
    }
    MlpNetwork net{spec, {}, {}, frozen};
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        Tensor w(Shape{spec.widths[l], spec.widths[l + 1]});
        for (double& v : w.values) v = in.get<double>("weights");
        Tensor b(Shape{spec.widths[l + 1]});
        for (double& v : b.values) v = in.get<double>("biases");
        net.weights.push_back(std::move(w));
        net.biases.push_back(std::move(b));
    }
    if (!in.done()) throw CorruptionError("checkpoint: trailing bytes after parameters");
    return net;
}

inline void save_checkpoint(const MlpNetwork& net, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    const std::string bytes = serialize_checkpoint(net);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + path.string());
}

inline MlpNetwork load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(std::move(bytes));
}

// Default architectures for 2-D experiments.
namespace arch {

inline constexpr std::size_t kHidden = 64;

inline MlpSpec source_classifier(std::size_t data_dim, std::size_t classes) {
    return mlp_spec({data_dim, kHidden, kHidden, classes}, Head::Logits);
}
inline MlpSpec feature_extractor(std::size_t data_dim) {
    return mlp_spec({data_dim, kHidden, kHidden}, Head::Features);
}
inline MlpSpec adaptive_classifier(std::size_t classes) { return mlp_spec({kHidden, classes}, Head::Logits); }
inline MlpSpec generator(std::size_t latent_dim, std::size_t classes, std::size_t data_dim) {
    return mlp_spec({latent_dim + classes, kHidden, kHidden, data_dim}, Head::RawVector);
}
inline MlpSpec gan_discriminator(std::size_t data_dim) {
    return mlp_spec({data_dim, kHidden, kHidden, 1}, Head::SigmoidScalar);
}
inline MlpSpec domain_discriminator(std::size_t feature_dim) {
    return mlp_spec({feature_dim, 32, 1}, Head::SigmoidScalar);
}

} // namespace arch

} // namespace sdda
