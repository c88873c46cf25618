#pragma once

#include <vector>

#include "mpn/gradcheck.hpp"
#include "mpn/losses.hpp"
#include "mpn/model.hpp"
#include "mpn/prior.hpp"

namespace mpn {

/// Micro MPN (shared conv1/conv2/CA, both branches) on 2 identities x 2
/// images, checked through the complete objective with class-wise alignment.
/// Priors include a partial mask and a cropped ROI so the alignment path is
/// differentiated too.
inline GradCheckResult model_gradcheck(const GradCheckOptions& options = {}, std::uint64_t seed = 3) {
  MpnConfig c;
  c.parts = 2;
  c.feature_dim = 4;
  c.ca_reduction = 2;
  c.num_classes = 2;
  c.image_h = 12;
  c.image_w = 4;
  c.backbone_widths = {4, 4};
  c.backbone_strides = {2, 1};
  c.use_ca = c.share_conv1 = c.share_conv2 = c.share_ca = true;
  c.mode = ModelMode::full;
  c.seed = seed;
  MpnModel model(c);
  model.set_update_running_stats(false);

  Rng rng(seed);
  Tensor images = detail::random_tensor(rng, {4, 3, c.image_h, c.image_w});
  const std::size_t fh = c.feat_h(), fw = c.feat_w();
  std::vector<PartPrior> priors(4, uniform_prior(fh, fw, c.parts));
  priors[1].mask[0] = priors[1].mask[3] = 0;
  priors[2].roi_top = 1;
  priors[2].roi_bottom = fh - 2;
  priors[2].strips = partition_rows(1, fh - 1, c.parts);
  priors[3].mask[fw * 2 + 1] = 0;
  priors[3].roi_top = 2;
  priors[3].strips = partition_rows(2, fh, c.parts);
  const std::vector<int> labels{0, 0, 1, 1};

  auto loss_fn = [&] {
    const ForwardResult f = model.forward(images, priors, Mode::train);
    LossInputs in{f.mt_logits, f.at_logits, f.h, f.g, labels, 2, 2, {}};
    return total_loss(in, LossOptions{}).total;
  };
  NamedTensors params = model.parameters();
  params.emplace_back("images", images);
  return gradcheck("model", loss_fn, params, options);
}

}  // namespace mpn
