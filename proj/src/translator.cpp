#include "snbi/translator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <list>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <nlohmann/json.hpp>

#include "snbi/errors.hpp"
#include "snbi/imgtensor.hpp"
#include "snbi/manifest.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace snbi::translator {

TranslatorConfig TranslatorConfig::tiny() {
    TranslatorConfig c;
    c.ngf = 8;
    c.ndf = 8;
    c.n_res = 2;
    c.d_layers = 2;
    c.image_size = 64;
    return c;
}

void TranslatorConfig::validate_fields() const {
    if (lambda_cyc <= 0.0) throw ValidationError("translator config: lambda_cyc must be > 0");
    if (base_lr <= 0.0) throw ValidationError("translator config: base_lr must be > 0");
    if (image_size <= 0 || image_size % 4 != 0)
        throw ValidationError("translator config: image_size must be positive and divisible by 4");
    if (pool_size < 0) throw ValidationError("translator config: pool_size must be >= 0");
    if (constant_epochs < 0 || decay_epochs < 0 || constant_epochs + decay_epochs < 1)
        throw ValidationError("translator config: schedule needs at least one epoch");
    if (batch_size < 1) throw ValidationError("translator config: batch_size must be >= 1");
}

nn::Tensor mae(const nn::Tensor& a, const nn::Tensor& b) {
    return nn::mean_all(nn::abs_op(nn::sub(a, b)));
}

nn::Tensor cycle_loss(const CycleBatch& batch) {
    return nn::add(mae(batch.x, batch.x_rec), mae(batch.y, batch.y_rec));
}

nn::Tensor adversarial_loss(const nn::Tensor& disc_out, bool target_is_real) {
    for (double v : disc_out.values())
        if (!std::isfinite(v))
            throw NumericError("adversarial_loss: non-finite discriminator output");
    const double target = target_is_real ? 1.0 : 0.0;
    return nn::mean_all(nn::square(nn::add_scalar(disc_out, -target)));
}

TotalLoss total_loss(const CycleBatch& batch, const nn::Tensor& d_on_y_hat,
                     const nn::Tensor& d_on_x_hat, const TranslatorConfig& config) {
    nn::Tensor gan_g = adversarial_loss(d_on_y_hat, true);
    nn::Tensor gan_f = adversarial_loss(d_on_x_hat, true);
    nn::Tensor cyc = cycle_loss(batch);
    nn::Tensor graph = nn::add(nn::add(gan_g, gan_f), nn::scale(cyc, config.lambda_cyc));

    TotalLoss out;
    out.values.gan_G = gan_g.item();
    out.values.gan_F = gan_f.item();
    out.values.cyc = cyc.item();
    out.values.total = graph.item();
    out.graph = graph;
    for (const auto& [name, v] :
         {std::pair<const char*, double>{"gan_G", out.values.gan_G},
          {"gan_F", out.values.gan_F},
          {"cyc", out.values.cyc}}) {
        if (!std::isfinite(v))
            throw NumericError(std::string("total_loss: non-finite component ") + name);
    }
    return out;
}

nn::Tensor ImagePool::query(const nn::Tensor& fake, Rng& rng) {
    if (capacity_ == 0) return fake;
    if (static_cast<int>(items_.size()) < capacity_) {
        items_.push_back(nn::detach(fake));
        return fake;
    }
    if (rng.uniform() < 0.5) {
        const size_t slot = rng.index(items_.size());
        nn::Tensor old = items_[slot];
        items_[slot] = nn::detach(fake);
        return old;
    }
    return fake;
}

namespace {

void write_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
uint64_t read_u64(std::ifstream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

} // namespace

void ImagePool::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write pool '" + path + "'");
    write_u64(out, static_cast<uint64_t>(capacity_));
    write_u64(out, items_.size());
    for (const auto& t : items_) {
        const nn::Shape s = t.shape();
        for (int d : {s.n, s.c, s.h, s.w}) write_u64(out, static_cast<uint64_t>(d));
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(t.values().size() * sizeof(double)));
    }
    if (!out) throw IoError("write failure on '" + path + "'");
}

void ImagePool::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open pool '" + path + "'");
    capacity_ = static_cast<int>(read_u64(in));
    const uint64_t count = read_u64(in);
    items_.clear();
    for (uint64_t i = 0; i < count; ++i) {
        nn::Shape s;
        s.n = static_cast<int>(read_u64(in));
        s.c = static_cast<int>(read_u64(in));
        s.h = static_cast<int>(read_u64(in));
        s.w = static_cast<int>(read_u64(in));
        std::vector<double> data(static_cast<size_t>(s.numel()));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        items_.push_back(nn::Tensor::from_data(s, std::move(data)));
    }
    if (!in) throw IoError("read failure on '" + path + "'");
}

TrainState TrainState::init(const TranslatorConfig& config) {
    config.validate_fields();
    TrainState s;
    s.config = config;
    Rng init_rng(Rng::mix(config.seed, 0x6e657473)); // parameter init stream
    s.G = nn::ResnetGenerator(config.ngf, config.n_res, init_rng);
    s.F = nn::ResnetGenerator(config.ngf, config.n_res, init_rng);
    s.D_X = nn::PatchDiscriminator(config.ndf, config.d_layers, init_rng);
    s.D_Y = nn::PatchDiscriminator(config.ndf, config.d_layers, init_rng);

    nn::NamedParams gen_params;
    for (auto& [name, t] : s.G.named_params()) gen_params.push_back({"G." + name, t});
    for (auto& [name, t] : s.F.named_params()) gen_params.push_back({"F." + name, t});
    nn::NamedParams disc_params;
    for (auto& [name, t] : s.D_X.named_params()) disc_params.push_back({"D_X." + name, t});
    for (auto& [name, t] : s.D_Y.named_params()) disc_params.push_back({"D_Y." + name, t});
    s.opt_G = nn::Adam(gen_params, 0.5, 0.999);
    s.opt_D = nn::Adam(disc_params, 0.5, 0.999);

    s.pool_X = ImagePool(config.pool_size);
    s.pool_Y = ImagePool(config.pool_size);
    s.rng = Rng(Rng::mix(config.seed, 0x706f6f6c)); // pool decision stream
    return s;
}

StepLosses train_step(TrainState& state, const nn::Tensor& wli, const nn::Tensor& nbi,
                      double lr) {
    auto g_params = state.G.named_params();
    for (auto& [name, t] : state.F.named_params()) g_params.push_back({name, t});
    auto d_params = state.D_X.named_params();
    for (auto& [name, t] : state.D_Y.named_params()) d_params.push_back({name, t});

    StepLosses losses;

    // generator update
    nn::zero_grads(g_params);
    nn::zero_grads(d_params);
    CycleBatch batch;
    batch.x = wli;
    batch.y = nbi;
    batch.y_hat = state.G.forward(batch.x);
    batch.x_rec = state.F.forward(batch.y_hat);
    batch.x_hat = state.F.forward(batch.y);
    batch.y_rec = state.G.forward(batch.x_hat);

    TotalLoss tl = total_loss(batch, state.D_Y.forward(batch.y_hat),
                              state.D_X.forward(batch.x_hat), state.config);
    losses.gen = tl.values;
    nn::Tensor objective = tl.graph;
    if (state.config.use_identity_loss) {
        nn::Tensor idt = nn::add(mae(state.G.forward(batch.y), batch.y),
                                 mae(state.F.forward(batch.x), batch.x));
        losses.identity = idt.item();
        objective = nn::add(
            objective,
            nn::scale(idt, state.config.lambda_cyc * state.config.lambda_identity));
    }
    objective.backward();
    state.opt_G.step(lr);

    // discriminator update on real vs pooled fake images
    nn::Tensor fake_y = state.pool_Y.query(nn::detach(batch.y_hat), state.rng);
    nn::Tensor fake_x = state.pool_X.query(nn::detach(batch.x_hat), state.rng);
    nn::zero_grads(d_params);
    nn::Tensor d_y = nn::scale(nn::add(adversarial_loss(state.D_Y.forward(batch.y), true),
                                       adversarial_loss(state.D_Y.forward(fake_y), false)),
                               0.5);
    nn::Tensor d_x = nn::scale(nn::add(adversarial_loss(state.D_X.forward(batch.x), true),
                                       adversarial_loss(state.D_X.forward(fake_x), false)),
                               0.5);
    losses.d_y = d_y.item();
    losses.d_x = d_x.item();
    nn::Tensor d_total = nn::add(d_y, d_x);
    if (!std::isfinite(d_total.item()))
        throw NumericError("train_step: non-finite discriminator loss");
    d_total.backward();
    state.opt_D.step(lr);

    ++state.step_count;
    return losses;
}

double lr_at_epoch(const TranslatorConfig& config, int epoch) {
    const int total = config.constant_epochs + config.decay_epochs;
    if (epoch < 0 || epoch >= total)
        throw ValidationError("lr_at_epoch: epoch " + std::to_string(epoch) +
                              " outside schedule [0, " + std::to_string(total) + ")");
    if (epoch < config.constant_epochs) return config.base_lr;
    const double k = static_cast<double>(epoch - config.constant_epochs + 1) /
                     static_cast<double>(config.decay_epochs);
    return config.base_lr * (1.0 - k);
}

namespace {

json config_to_json(const TranslatorConfig& c) {
    json j;
    j["lambda_cyc"] = c.lambda_cyc;
    j["base_lr"] = c.base_lr;
    j["constant_epochs"] = c.constant_epochs;
    j["decay_epochs"] = c.decay_epochs;
    j["image_size"] = c.image_size;
    j["pool_size"] = c.pool_size;
    j["seed"] = c.seed;
    j["use_identity_loss"] = c.use_identity_loss;
    j["lambda_identity"] = c.lambda_identity;
    j["ngf"] = c.ngf;
    j["ndf"] = c.ndf;
    j["n_res"] = c.n_res;
    j["d_layers"] = c.d_layers;
    j["batch_size"] = c.batch_size;
    j["iterations_per_epoch"] = c.iterations_per_epoch;
    j["image_cache_size"] = c.image_cache_size;
    return j;
}

TranslatorConfig config_from_json(const json& j) {
    TranslatorConfig c;
    c.lambda_cyc = j.value("lambda_cyc", c.lambda_cyc);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.constant_epochs = j.value("constant_epochs", c.constant_epochs);
    c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
    c.image_size = j.value("image_size", c.image_size);
    c.pool_size = j.value("pool_size", c.pool_size);
    c.seed = j.value("seed", c.seed);
    c.use_identity_loss = j.value("use_identity_loss", c.use_identity_loss);
    c.lambda_identity = j.value("lambda_identity", c.lambda_identity);
    c.ngf = j.value("ngf", c.ngf);
    c.ndf = j.value("ndf", c.ndf);
    c.n_res = j.value("n_res", c.n_res);
    c.d_layers = j.value("d_layers", c.d_layers);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations_per_epoch = j.value("iterations_per_epoch", c.iterations_per_epoch);
    c.image_cache_size = j.value("image_cache_size", c.image_cache_size);
    return c;
}

/// Capped cache of decoded training images, resized to the working size.
class ImageCache {
public:
    ImageCache(const DatasetManifest& manifest, int image_size, int max_entries)
        : manifest_(manifest), image_size_(image_size), max_entries_(max_entries) {}

    nn::Tensor get(const std::string& id) {
        auto it = cache_.find(id);
        if (it != cache_.end()) return it->second;
        const ImageRecord* rec = manifest_.find(id);
        if (!rec) throw ValidationError("image cache: unknown record '" + id + "'");
        cv::Mat img = cv::imread(resolve_path(manifest_, *rec), cv::IMREAD_COLOR);
        if (img.empty())
            throw IoError("cannot load image '" + rec->path + "' for record '" + id + "'");
        cv::Mat resized;
        cv::resize(img, resized, cv::Size(image_size_, image_size_), 0, 0, cv::INTER_LINEAR);
        nn::Tensor t = nn::image_to_tensor(resized);
        if (static_cast<int>(cache_.size()) < max_entries_) cache_.emplace(id, t);
        return t;
    }

private:
    const DatasetManifest& manifest_;
    int image_size_;
    int max_entries_;
    std::map<std::string, nn::Tensor> cache_;
};

} // namespace

void save_checkpoint(const TrainState& state, const std::string& dir) {
    fs::create_directories(dir);
    json meta;
    meta["config"] = config_to_json(state.config);
    meta["epoch"] = state.epoch;
    meta["step_count"] = state.step_count;
    meta["rng"] = state.rng.save_state();
    std::ofstream mf(fs::path(dir) / "state.json", std::ios::trunc);
    if (!mf) throw IoError("cannot write checkpoint state '" + dir + "'");
    mf << meta.dump(2) << "\n";

    nn::save_params(state.G.named_params(), (fs::path(dir) / "G.params").string());
    nn::save_params(state.F.named_params(), (fs::path(dir) / "F.params").string());
    nn::save_params(state.D_X.named_params(), (fs::path(dir) / "D_X.params").string());
    nn::save_params(state.D_Y.named_params(), (fs::path(dir) / "D_Y.params").string());
    state.opt_G.save((fs::path(dir) / "adam_G.state").string());
    state.opt_D.save((fs::path(dir) / "adam_D.state").string());
    state.pool_X.save((fs::path(dir) / "pool_X.bin").string());
    state.pool_Y.save((fs::path(dir) / "pool_Y.bin").string());
}

TrainState load_checkpoint(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "state.json");
    if (!mf) throw IoError("cannot open checkpoint '" + dir + "'");
    json meta = json::parse(mf);
    TrainState state = TrainState::init(config_from_json(meta.at("config")));
    state.epoch = meta.at("epoch").get<int>();
    state.step_count = meta.at("step_count").get<int64_t>();
    state.rng.load_state(meta.at("rng").get<std::string>());

    nn::load_params(state.G.named_params(), (fs::path(dir) / "G.params").string());
    nn::load_params(state.F.named_params(), (fs::path(dir) / "F.params").string());
    nn::load_params(state.D_X.named_params(), (fs::path(dir) / "D_X.params").string());
    nn::load_params(state.D_Y.named_params(), (fs::path(dir) / "D_Y.params").string());
    state.opt_G.load((fs::path(dir) / "adam_G.state").string());
    state.opt_D.load((fs::path(dir) / "adam_D.state").string());
    state.pool_X.load((fs::path(dir) / "pool_X.bin").string());
    state.pool_Y.load((fs::path(dir) / "pool_Y.bin").string());
    return state;
}

TrainState restage(TrainState state, const TranslatorConfig& new_config) {
    new_config.validate_fields();
    const auto& old = state.config;
    if (old.ngf != new_config.ngf || old.ndf != new_config.ndf ||
        old.n_res != new_config.n_res || old.d_layers != new_config.d_layers ||
        old.image_size != new_config.image_size)
        throw ValidationError("restage: architecture fields must match the trained state");
    state.config = new_config;
    state.epoch = 0;
    return state;
}

std::string latest_checkpoint(const std::string& ckpt_dir) {
    const fs::path marker = fs::path(ckpt_dir) / "latest.txt";
    if (!fs::exists(marker)) return "";
    std::ifstream in(marker);
    std::string name;
    std::getline(in, name);
    if (name.empty()) return "";
    const fs::path dir = fs::path(ckpt_dir) / name;
    return fs::exists(dir / "state.json") ? dir.string() : "";
}

TrainState train(const TranslatorConfig& config, const pairing::SemiPairIndex& index,
                 const DatasetManifest& manifest, const std::string& ckpt_dir,
                 const EpochCallback& on_epoch) {
    config.validate_fields();
    if (index.empty()) throw ValidationError("train: empty semi-pair index");
    fs::create_directories(ckpt_dir);

    TrainState state;
    const std::string resume = latest_checkpoint(ckpt_dir);
    if (!resume.empty()) {
        state = load_checkpoint(resume);
    } else {
        state = TrainState::init(config);
        save_checkpoint(state, (fs::path(ckpt_dir) / "epoch_000").string());
        std::ofstream marker(fs::path(ckpt_dir) / "latest.txt", std::ios::trunc);
        marker << "epoch_000\n";
    }

    const int total_epochs = state.config.constant_epochs + state.config.decay_epochs;
    const int iterations = state.config.iterations_per_epoch > 0
                               ? state.config.iterations_per_epoch
                               : static_cast<int>(index.total_wli());

    ImageCache cache(manifest, state.config.image_size, state.config.image_cache_size);
    const fs::path history_path = fs::path(ckpt_dir) / "history.csv";
    const bool fresh_history = !fs::exists(history_path);
    std::ofstream history(history_path, std::ios::app);
    if (!history) throw IoError("cannot write loss history '" + history_path.string() + "'");
    if (fresh_history)
        history << "epoch,iteration,lr,gan_G,gan_F,cyc,identity,total,loss_D_X,loss_D_Y\n";

    char row[256];
    for (int epoch = state.epoch; epoch < total_epochs; ++epoch) {
        const double lr = lr_at_epoch(state.config, epoch);
        pairing::EpochIterator it(index, static_cast<uint64_t>(iterations),
                                  Rng::mix(state.config.seed, 0xe70c + epoch));
        std::vector<StepLosses> epoch_losses;
        std::pair<std::string, std::string> pair;
        int iteration = 0;
        while (true) {
            std::vector<nn::Tensor> xs, ys;
            for (int b = 0; b < state.config.batch_size && it.next(pair); ++b) {
                xs.push_back(cache.get(pair.first));
                ys.push_back(cache.get(pair.second));
            }
            if (xs.empty()) break;
            StepLosses losses;
            try {
                losses = train_step(state, nn::stack_batch(xs), nn::stack_batch(ys), lr);
            } catch (const NumericError&) {
                save_checkpoint(state, (fs::path(ckpt_dir) / "diagnostic").string());
                throw;
            }
            std::snprintf(row, sizeof row,
                          "%d,%d,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f\n", epoch,
                          iteration, lr, losses.gen.gan_G, losses.gen.gan_F, losses.gen.cyc,
                          losses.identity, losses.gen.total, losses.d_x, losses.d_y);
            history << row;
            epoch_losses.push_back(losses);
            ++iteration;
        }
        state.epoch = epoch + 1;
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d", state.epoch);
        save_checkpoint(state, (fs::path(ckpt_dir) / name).string());
        std::ofstream marker(fs::path(ckpt_dir) / "latest.txt", std::ios::trunc);
        marker << name << "\n";
        history.flush();
        if (on_epoch) on_epoch(epoch, epoch_losses);
    }
    return state;
}

cv::Mat translate_image(const TrainState& state, const cv::Mat& wli_image) {
    if (wli_image.empty()) throw ShapeError("translate_image: empty image");
    nn::NoGradGuard guard;
    cv::Mat resized;
    cv::resize(wli_image, resized,
               cv::Size(state.config.image_size, state.config.image_size), 0, 0,
               cv::INTER_LINEAR);
    nn::Tensor out = state.G.forward(nn::image_to_tensor(resized));
    cv::Mat snbi = nn::tensor_to_image(out);
    cv::Mat restored;
    cv::resize(snbi, restored, wli_image.size(), 0, 0, cv::INTER_LINEAR);
    return restored;
}

ImageRecord translate_record(const TrainState& state, const DatasetManifest& manifest,
                             const ImageRecord& record, const std::string& out_dir) {
    if (record.modality != Modality::WLI)
        throw ModalityError("translate: record '" + record.id + "' is " +
                            to_string(record.modality) + ", expected WLI");
    cv::Mat img = cv::imread(resolve_path(manifest, record), cv::IMREAD_COLOR);
    if (img.empty()) throw IoError("translate: cannot load '" + record.path + "'");
    if (img.cols != record.width || img.rows != record.height)
        throw ValidationError("translate: image size of '" + record.id +
                              "' does not match its record");

    cv::Mat snbi = translate_image(state, img);
    fs::create_directories(out_dir);
    ImageRecord out = record;
    out.id = record.id + "_snbi";
    out.modality = Modality::SNBI;
    out.source_id = record.id;
    const fs::path img_path = fs::path(out_dir) / (out.id + ".png");
    if (!cv::imwrite(img_path.string(), snbi))
        throw IoError("translate: cannot write '" + img_path.string() + "'");
    out.path = img_path.string();
    return out;
}

double eval_cycle_error(const TrainState& state, const DatasetManifest& manifest,
                        const std::vector<const ImageRecord*>& wli,
                        const std::vector<const ImageRecord*>& nbi) {
    nn::NoGradGuard guard;
    const int size = state.config.image_size;
    auto load = [&](const ImageRecord* rec) {
        cv::Mat img = cv::imread(resolve_path(manifest, *rec), cv::IMREAD_COLOR);
        if (img.empty()) throw IoError("cannot load '" + rec->path + "'");
        cv::Mat resized;
        cv::resize(img, resized, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
        return nn::image_to_tensor(resized);
    };
    double total = 0.0;
    long count = 0;
    for (const auto* rec : wli) {
        nn::Tensor x = load(rec);
        total += mae(x, state.F.forward(state.G.forward(x))).item();
        ++count;
    }
    for (const auto* rec : nbi) {
        nn::Tensor y = load(rec);
        total += mae(y, state.G.forward(state.F.forward(y))).item();
        ++count;
    }
    if (count == 0) throw ValidationError("eval_cycle_error: no records given");
    return total / static_cast<double>(count);
}

} // namespace snbi::translator
