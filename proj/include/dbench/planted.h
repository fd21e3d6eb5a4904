#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dbench/site_model.h"
#include "dbench/world.h"

namespace dbench {

struct PlantedConfig {
    std::size_t site_dim = 16;
    // Subspace dimension per attribute; empty means 2 for every attribute.
    std::vector<std::size_t> dims;
    // Principal angle between the subspaces of the first two stored
    // attributes, in degrees, within (0, 90]. 90 gives orthogonal,
    // axis-aligned subspaces.
    double overlap_deg = 90.0;
    // Attributes declared as function_of another attribute are read out from
    // the parent's readout (the model computes them rather than storing them).
    bool derived_readouts = false;
    double code_scale = 1.0;
    double readout_beta = 4.0;
    // Gaussian noise outside the attribute subspaces: one draw per entity plus
    // one per (entity, template) prompt.
    double noise = 0.1;
    double context_noise = 0.5;
    std::uint64_t seed = 0;
};

// Single-site oracle model. Each entity's site vector is the sum of one code
// vector per attribute embedded in that attribute's subspace plus noise in
// the unused dimensions. Attribute A is read out by projecting onto the dual
// basis of its subspace and scoring each value code by negative squared
// distance, so readouts are exact linear functions of the planted subspaces.
class PlantedModel final : public SiteModel {
   public:
    PlantedModel(const World& world, const PlantedConfig& cfg);

    std::size_t num_layers() const override { return 1; }
    std::size_t site_dim() const override { return cfg_.site_dim; }
    std::size_t vocab_size() const override { return vocab_.size(); }

    Prompt make_prompt(const World& world, int entity, int tmpl) const override;
    int label_token(const Prompt& base, const std::string& value) const override;
    Tensor site_values(std::span<const Prompt> prompts, std::size_t layer) const override;
    Tensor next_logits(std::span<const Prompt> prompts, const Splice* splice = nullptr) const override;

    const std::string& token_text(int id) const { return vocab_.at(id); }
    // Orthonormal rows spanning attribute a's subspace: [k_a, site_dim].
    const Tensor& subspace(int a) const { return basis_[a]; }
    // Site vectors without the per-prompt noise.
    const Tensor& site_table() const { return table_; }
    std::size_t attribute_dim(int a) const { return basis_[a].rows(); }

   private:
    Tensor readout(const Tensor& x, int a) const;
    std::size_t vocab_size_of(std::size_t a) const;

    PlantedConfig cfg_;
    std::vector<std::string> vocab_;     // every attribute value, attribute-major
    std::vector<std::size_t> offset_;     // first token id of each attribute
    std::vector<int> parent_;             // derived readout source or -1
    std::vector<std::vector<int>> map_;   // parent value -> child value
    std::vector<Tensor> basis_;           // per attribute [k, d]; k = 0 when derived
    std::vector<Tensor> dual_;            // per attribute [d, k]
    std::vector<Tensor> codes_;           // per attribute [n_values, k]
    std::vector<Tensor> code_sq_;         // per attribute [n_values]
    Tensor table_;                        // [n_entities, d]
    std::vector<float> context_;          // [n_entities * n_templates, d]
    std::size_t n_templates_ = 0;
    std::unordered_map<std::string, int> token_id_;
};

// Convenience wrapper with a descriptive name for call sites.
inline PlantedModel build_planted_model(const World& world, const PlantedConfig& cfg) { return {world, cfg}; }

}  // namespace dbench
