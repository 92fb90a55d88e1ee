#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "snbi/nn.hpp"
#include "snbi/pairing.hpp"
#include "snbi/rng.hpp"
#include "snbi/tensor.hpp"
#include "snbi/types.hpp"

namespace snbi::translator {

struct TranslatorConfig {
    double lambda_cyc = 10.0;
    double base_lr = 2e-4;
    int constant_epochs = 100;
    int decay_epochs = 0;
    int image_size = 512;
    int pool_size = 50;
    uint64_t seed = 0;
    bool use_identity_loss = false;
    double lambda_identity = 0.5; // scales lambda_cyc when identity loss is on

    int ngf = 64;     // generator base width
    int ndf = 64;     // discriminator base width
    int n_res = 9;    // generator residual blocks
    int d_layers = 3; // discriminator stride-2 convolutions
    int batch_size = 1;
    int iterations_per_epoch = 0; // 0 = number of WLI records in the index
    int image_cache_size = 512;   // decoded-image cache entries during training

    /// Desk-scale preset: 1/8 width, 2 residual blocks, 64 px working size.
    static TranslatorConfig tiny();

    void validate_fields() const;
};

/// One training step's images and their translations/reconstructions.
struct CycleBatch {
    nn::Tensor x;     // WLI input
    nn::Tensor y;     // NBI input
    nn::Tensor y_hat; // G(x)
    nn::Tensor x_rec; // F(G(x))
    nn::Tensor x_hat; // F(y)
    nn::Tensor y_rec; // G(F(y))
};

struct LossBreakdown {
    double gan_G = 0.0;
    double gan_F = 0.0;
    double cyc = 0.0;
    double total = 0.0; // gan_G + gan_F + lambda_cyc * cyc
};

/// Mean absolute error between two same-shaped tensors.
nn::Tensor mae(const nn::Tensor& a, const nn::Tensor& b);

/// Forward + backward cycle-consistency term: mean|x - x_rec| + mean|y - y_rec|.
nn::Tensor cycle_loss(const CycleBatch& batch);

/// Least-squares adversarial loss mean((d - t)^2), t = 1 for real else 0.
nn::Tensor adversarial_loss(const nn::Tensor& disc_out, bool target_is_real);

struct TotalLoss {
    LossBreakdown values;
    nn::Tensor graph; // generator-side objective for backward()
};

/// Generator-side objective: the two fooling terms plus the weighted cycle
/// term. d_on_y_hat/d_on_x_hat are D_Y(G(x)) and D_X(F(y)).
TotalLoss total_loss(const CycleBatch& batch, const nn::Tensor& d_on_y_hat,
                     const nn::Tensor& d_on_x_hat, const TranslatorConfig& config);

/// History buffer of generated images shown to the discriminators.
class ImagePool {
public:
    ImagePool() = default;
    explicit ImagePool(int capacity) : capacity_(capacity) {}

    /// With capacity 0 returns the input unchanged. Otherwise fills first,
    /// then returns either the input or a swapped-out older fake (p = 1/2).
    nn::Tensor query(const nn::Tensor& fake, Rng& rng);

    const std::vector<nn::Tensor>& items() const { return items_; }
    int capacity() const { return capacity_; }
    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    int capacity_ = 0;
    std::vector<nn::Tensor> items_;
};

struct TrainState {
    TranslatorConfig config;
    nn::ResnetGenerator G; // WLI -> NBI
    nn::ResnetGenerator F; // NBI -> WLI
    nn::PatchDiscriminator D_X;
    nn::PatchDiscriminator D_Y;
    nn::Adam opt_G;
    nn::Adam opt_D;
    ImagePool pool_X;
    ImagePool pool_Y;
    Rng rng;
    int epoch = 0;        // completed epochs
    int64_t step_count = 0;

    static TrainState init(const TranslatorConfig& config);
};

struct StepLosses {
    LossBreakdown gen;
    double identity = 0.0;
    double d_x = 0.0;
    double d_y = 0.0;
};

/// One optimization step on a prepared (WLI, NBI) tensor pair: generator
/// update on the Eq.-style objective, then discriminator update on real vs
/// pooled fakes.
StepLosses train_step(TrainState& state, const nn::Tensor& wli, const nn::Tensor& nbi,
                      double lr);

/// base_lr during the constant phase, then linear decay hitting zero at the
/// final epoch. epoch must lie in [0, constant_epochs + decay_epochs).
double lr_at_epoch(const TranslatorConfig& config, int epoch);

using EpochCallback = std::function<void(int epoch, const std::vector<StepLosses>&)>;

/// Full schedule over semi-paired samples; checkpoints into ckpt_dir after
/// every epoch and resumes from the newest checkpoint already there.
TrainState train(const TranslatorConfig& config, const pairing::SemiPairIndex& index,
                 const DatasetManifest& manifest, const std::string& ckpt_dir,
                 const EpochCallback& on_epoch = nullptr);

void save_checkpoint(const TrainState& state, const std::string& dir);
TrainState load_checkpoint(const std::string& dir);

/// Re-schedules a trained state for a follow-on training stage: keeps
/// parameters, optimizer moments and pools; resets the epoch counter so the
/// new schedule starts from its own epoch 0. Architecture fields must match.
TrainState restage(TrainState state, const TranslatorConfig& new_config);

/// Newest epoch checkpoint under ckpt_dir, or empty when none exists.
std::string latest_checkpoint(const std::string& ckpt_dir);

/// WLI image -> SNBI image at native resolution (resize to the working size,
/// run G, resize back).
cv::Mat translate_image(const TrainState& state, const cv::Mat& wli_image);

/// WLI record -> SNBI record: writes the translated PNG into out_dir, copies
/// annotations and geometry, links source_id.
ImageRecord translate_record(const TrainState& state, const DatasetManifest& manifest,
                             const ImageRecord& record, const std::string& out_dir);

/// Mean cycle-reconstruction error of the current generators over the given
/// records (used to monitor training progress).
double eval_cycle_error(const TrainState& state, const DatasetManifest& manifest,
                        const std::vector<const ImageRecord*>& wli,
                        const std::vector<const ImageRecord*>& nbi);

} // namespace snbi::translator
