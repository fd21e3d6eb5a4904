#include <algorithm>

#include "dbench/checkpoint.h"
#include "dbench/errors.h"
#include "dbench/intervention.h"
#include "json.hpp"

namespace dbench {

void Featurizer::check_splice(const Tensor& base, const Tensor& source) const {
    if (base.shape() != source.shape()) throw DimensionError("splice: base and source rows differ in shape");
    if (base.rank() != 2 || base.cols() != input_dim())
        throw DimensionError("splice: rows have shape " + shape_str(base.shape()) + ", featurizer expects " +
                             std::to_string(input_dim()) + " dims");
}

Tensor Featurizer::splice(const Tensor& base, const Tensor& source, std::span<const std::size_t> features) const {
    check_splice(base, source);
    if (features.empty()) return base;
    if (features.size() == feature_dim() && exact_inverse()) return source;
    std::vector<float> mask(feature_dim(), 0.0f);
    for (auto i : features) mask[i] = 1.0f;
    const Tensor fb = encode(base);
    const Tensor fs = encode(source);
    const Tensor fe = add(fb, mul_row(sub(fs, fb), Tensor({feature_dim()}, std::move(mask))));
    return add(base, sub(decode(fe), decode(fb)));
}

void FeatureHandle::validate() const {
    if (!featurizer) throw ContractError("feature handle without featurizer");
    std::vector<std::size_t> sorted = features;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ContractError("feature set contains duplicate indices");
    if (!sorted.empty() && sorted.back() >= featurizer->feature_dim())
        throw ContractError("feature index " + std::to_string(sorted.back()) + " outside featurized dimension " +
                            std::to_string(featurizer->feature_dim()));
}

FeatureHandle full_rep_handle(std::size_t site_dim, std::size_t layer) {
    FeatureHandle h;
    h.featurizer = std::make_shared<IdentityFeaturizer>(site_dim);
    h.features.resize(site_dim);
    for (std::size_t i = 0; i < site_dim; ++i) h.features[i] = i;
    h.layer = layer;
    return h;
}

Tensor get_vals(const SiteModel& model, const Prompt& x, std::size_t layer) {
    NoGradGuard no_grad;
    return model.site_values(std::span(&x, 1), layer).reshape({model.site_dim()});
}

Tensor get_feature(const SiteModel& model, const Prompt& x, const FeatureHandle& handle) {
    handle.validate();
    NoGradGuard no_grad;
    const Tensor f = handle.featurizer->encode(model.site_values(std::span(&x, 1), handle.layer));
    if (handle.features.empty()) return Tensor({0}, {});
    return gather_rows(transpose(f), handle.features).reshape({handle.features.size()});
}

Tensor spliced_logits(const SiteModel& model, std::size_t layer, std::span<const Prompt> base,
                      const std::function<Tensor(const Tensor& base_rows)>& edit) {
    const Splice s{layer, edit};
    return model.next_logits(base, &s);
}

Tensor interchange_logits(const SiteModel& model, const FeatureHandle& handle, std::span<const Prompt> base,
                          std::span<const Prompt> source) {
    handle.validate();
    if (base.size() != source.size()) throw ContractError("interchange: base and source batches differ in size");
    if (handle.featurizer->input_dim() != model.site_dim())
        throw DimensionError("featurizer expects " + std::to_string(handle.featurizer->input_dim()) +
                             " dims but the site has " + std::to_string(model.site_dim()));
    NoGradGuard no_grad;
    // Source features always come from a clean pass.
    const Tensor src = model.site_values(source, handle.layer);
    const Featurizer& f = *handle.featurizer;
    return spliced_logits(model, handle.layer, base,
                          [&](const Tensor& rows) { return f.splice(rows, src, handle.features); });
}

std::vector<int> interchange_intervene(const SiteModel& model, const FeatureHandle& handle,
                                       std::span<const Prompt> base, std::span<const Prompt> source) {
    return argmax_rows(interchange_logits(model, handle, base, source));
}

std::vector<int> full_rep_intervene(const SiteModel& model, std::size_t layer, std::span<const Prompt> base,
                                    std::span<const Prompt> source) {
    if (base.size() != source.size()) throw ContractError("interchange: base and source batches differ in size");
    NoGradGuard no_grad;
    const Tensor src = model.site_values(source, layer);
    return argmax_rows(spliced_logits(model, layer, base, [&](const Tensor&) { return src; }));
}

void tuple_prompts(const SiteModel& model, const World& world, std::span<const InterventionTuple> tuples,
                   std::vector<Prompt>& base, std::vector<Prompt>& source) {
    base.clear();
    source.clear();
    for (const auto& t : tuples) {
        base.push_back(model.make_prompt(world, t.base_entity, t.base_template));
        source.push_back(model.make_prompt(world, t.source_entity, t.source_template));
    }
}

void write_traces(std::span<const TupleTrace> traces, const World& world,
                  const std::function<std::string(int)>& token_text, const std::filesystem::path& file) {
    std::string out;
    for (const auto& tr : traces) {
        const auto& t = *tr.tuple;
        out += nlohmann::json{{"x", t.base_text},
                              {"x'", t.source_text},
                              {"A*", world.attributes[t.target_attribute].name},
                              {"y", t.label},
                              {"prediction", token_text(tr.predicted)},
                              {"correct", tr.predicted == tr.gold},
                              {"kind", to_string(t.kind)}}
                   .dump() +
               "\n";
    }
    write_file_atomic(file, out);
}

}  // namespace dbench
