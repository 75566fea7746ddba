#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>

#include "steerkit/autodiff.hpp"
#include "steerkit/model.hpp"

namespace steerkit {

// Full-sequence forward of the toy transformer recorded on a GradTape. Uses
// the same kernels and accumulation order as WrappedModel, so logits agree
// with the inference engine bit for bit.
class TapeModel {
public:
    // With trainable_weights the model weights become tape parameters (used by
    // pretraining); otherwise they are frozen constants.
    TapeModel(ad::GradTape& tape, const ModelBundle& bundle, bool trainable_weights = false);

    const EngineConfig& config() const { return bundle_.config(); }
    ad::GradTape& tape() { return tape_; }
    ad::Var weight(std::string_view name) const;
    const std::map<std::string, ad::Var, std::less<>>& weights() const { return vars_; }

    // [n x d] token plus position embeddings for positions [start, start + n).
    ad::Var embed(std::span<const int> tokens, int start = 0);
    // One decoder layer (1-based) over a full causal sequence.
    ad::Var layer(int l, ad::Var x);
    // Final norm and unembedding: [n x d] -> [n x vocab].
    ad::Var logits(ad::Var x);
    // Runs layers [first, last] on x.
    ad::Var layers(ad::Var x, int first, int last);

private:
    ad::Var norm(ad::Var x, std::string_view gain, std::string_view bias);
    ad::Var linear(ad::Var x, std::string_view weight, std::string_view bias);

    ad::GradTape& tape_;
    const ModelBundle& bundle_;
    std::map<std::string, ad::Var, std::less<>> vars_;
};

}  // namespace steerkit
