#include "nrgs/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace nrgs {

namespace {

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
std::string toStr(const T& v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = [] {
    std::map<std::string, Field> m;
    auto dbl = [&m](const std::string& key, double RunConfig::*ptr) {
      m[key] = {[ptr](RunConfig& c, const std::string& v) { c.*ptr = std::stod(v); },
                [ptr](const RunConfig& c) { return toStr(c.*ptr); }};
    };
    auto integer = [&m](const std::string& key, int RunConfig::*ptr) {
      m[key] = {[ptr](RunConfig& c, const std::string& v) { c.*ptr = std::stoi(v); },
                [ptr](const RunConfig& c) { return toStr(c.*ptr); }};
    };
    auto boolean = [&m](const std::string& key, bool RunConfig::*ptr) {
      m[key] = {[ptr](RunConfig& c, const std::string& v) {
                  if (v == "true" || v == "1")
                    c.*ptr = true;
                  else if (v == "false" || v == "0")
                    c.*ptr = false;
                  else
                    throw std::invalid_argument("expected true/false");
                },
                [ptr](const RunConfig& c) { return c.*ptr ? std::string("true") : std::string("false"); }};
    };
    auto str = [&m](const std::string& key, std::string RunConfig::*ptr) {
      m[key] = {[ptr](RunConfig& c, const std::string& v) { c.*ptr = v; },
                [ptr](const RunConfig& c) { return c.*ptr; }};
    };

    dbl("valid_delta", &RunConfig::validDelta);
    dbl("tau_transmittance", &RunConfig::tauTransmittance);
    dbl("anneal_lambda0", &RunConfig::annealLambda0);
    dbl("anneal_lambda_min", &RunConfig::annealLambdaMin);
    dbl("anneal_tau", &RunConfig::annealTau);
    dbl("lambda_geo", &RunConfig::lambdaGeo);
    dbl("huber_scale", &RunConfig::huberScale);
    dbl("irls_eps", &RunConfig::irlsEps);
    dbl("tau_def", &RunConfig::tauDef);
    integer("refine_iters", &RunConfig::refineIters);
    dbl("lr_cam_rot", &RunConfig::lrCamRot);
    dbl("lr_cam_trans_mm", &RunConfig::lrCamTransMm);
    dbl("eps_def", &RunConfig::epsDef);
    dbl("lambda_reg", &RunConfig::lambdaReg);
    dbl("lambda_tem", &RunConfig::lambdaTem);
    integer("deform_iters", &RunConfig::deformIters);
    dbl("lr_residual_mm", &RunConfig::lrResidualMm);
    dbl("lr_residual", &RunConfig::lrResidual);
    dbl("ransac_threshold_px", &RunConfig::ransacThresholdPx);
    integer("ransac_iters", &RunConfig::ransacIters);
    dbl("ransac_confidence", &RunConfig::ransacConfidence);
    integer("min_pnp_points", &RunConfig::minPnpPoints);
    dbl("kf_covis_ratio", &RunConfig::kfCovisRatio);
    dbl("kf_rdef", &RunConfig::kfRdef);
    dbl("kf_translation_mm", &RunConfig::kfTranslationMm);
    integer("kf_interval", &RunConfig::kfInterval);
    integer("window_size", &RunConfig::windowSize);
    integer("window_pose_iters", &RunConfig::windowPoseIters);
    integer("ba_iters", &RunConfig::baIters);
    integer("ba_responsibility_every", &RunConfig::baResponsibilityEvery);
    dbl("lambda_w", &RunConfig::lambdaW);
    dbl("lambda_temp", &RunConfig::lambdaTemp);
    dbl("lambda_spatial", &RunConfig::lambdaSpatial);
    dbl("lr_map_mean_mm", &RunConfig::lrMapMeanMm);
    dbl("lr_map_scale", &RunConfig::lrMapScale);
    dbl("lr_map_rot", &RunConfig::lrMapRot);
    dbl("lr_color", &RunConfig::lrColor);
    dbl("lr_opacity", &RunConfig::lrOpacity);
    dbl("lr_def_logit", &RunConfig::lrDefLogit);
    dbl("lr_basis_weight_mm", &RunConfig::lrBasisWeightMm);
    dbl("lr_basis_weight", &RunConfig::lrBasisWeight);
    dbl("lr_ba_cam_rot", &RunConfig::lrBaCamRot);
    dbl("lr_ba_cam_trans_mm", &RunConfig::lrBaCamTransMm);
    dbl("beta", &RunConfig::beta);
    dbl("eta_decay", &RunConfig::etaDecay);
    dbl("agg_eps", &RunConfig::aggEps);
    dbl("pi_deform", &RunConfig::piDeform);
    boolean("management_enabled", &RunConfig::managementEnabled);
    dbl("delta_cov", &RunConfig::deltaCov);
    dbl("tau_rgb", &RunConfig::tauRgb);
    dbl("tau_prob", &RunConfig::tauProb);
    dbl("tau_err", &RunConfig::tauErr);
    dbl("eta_mu", &RunConfig::etaMu);
    dbl("eta_sigma", &RunConfig::etaSigma);
    dbl("delta_act", &RunConfig::deltaAct);
    integer("extension_stride", &RunConfig::extensionStride);
    dbl("tau_new_transmittance", &RunConfig::tauNewTransmittance);
    dbl("new_prim_wd", &RunConfig::newPrimWd);
    integer("init_bases_per_attr", &RunConfig::initBasesPerAttr);
    dbl("basis_extent_factor", &RunConfig::basisExtentFactor);
    integer("knn", &RunConfig::knn);
    integer("init_first_frame_iters", &RunConfig::initFirstFrameIters);
    dbl("init_ssim_lambda", &RunConfig::initSsimLambda);
    boolean("confidence_weighting", &RunConfig::confidenceWeighting);
    str("dataset", &RunConfig::datasetDir);
    str("output_dir", &RunConfig::outputDir);
    str("prior_source", &RunConfig::priorSource);
    m["seed"] = {[](RunConfig& c, const std::string& v) { c.seed = std::stoull(v); },
                 [](const RunConfig& c) { return toStr(c.seed); }};
    integer("threads", &RunConfig::threads);
    boolean("dump_channels", &RunConfig::dumpChannels);
    return m;
  }();
  return f;
}

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("RunConfig: ") + what);
}

}  // namespace

void RunConfig::validate() const {
  require(validDelta >= 0 && validDelta < 0.5, "valid_delta in [0, 0.5)");
  require(tauTransmittance > 0 && tauTransmittance <= 1, "tau_transmittance in (0, 1]");
  require(annealLambda0 >= 0 && annealLambdaMin >= 0 && annealTau > 0, "anneal schedule");
  require(lambdaGeo >= 0, "lambda_geo >= 0");
  require(huberScale > 0 && irlsEps > 0, "robust loss constants");
  require(tauDef > 0 && tauDef <= 1, "tau_def in (0, 1]");
  require(refineIters > 0 && deformIters >= 0, "iteration counts positive");
  require(lrCamRot > 0 && lrCamTransMm > 0, "tracking learning rates positive");
  require(epsDef >= 0 && epsDef < 1, "eps_def in [0, 1)");
  require(lambdaReg >= 0 && lambdaTem >= 0, "residual regularizer weights");
  require(lrResidualMm > 0 && lrResidual > 0, "residual learning rates positive");
  require(ransacThresholdPx > 0 && ransacIters > 0, "ransac parameters");
  require(ransacConfidence > 0 && ransacConfidence < 1, "ransac_confidence in (0, 1)");
  require(minPnpPoints >= 4, "min_pnp_points >= 4");
  require(kfCovisRatio > 0 && kfCovisRatio <= 1, "kf_covis_ratio in (0, 1]");
  require(kfRdef > 0 && kfTranslationMm > 0 && kfInterval > 0, "keyframe thresholds positive");
  require(windowSize >= 2, "window_size >= 2");
  require(windowPoseIters >= 0 && baIters > 0 && baResponsibilityEvery > 0, "mapping iterations");
  require(lambdaW >= 0 && lambdaTemp >= 0 && lambdaSpatial >= 0, "BA loss weights");
  require(lrMapMeanMm > 0 && lrMapScale > 0 && lrMapRot > 0, "map learning rates positive");
  require(lrColor > 0 && lrOpacity > 0 && lrDefLogit > 0, "appearance learning rates positive");
  require(lrBasisWeightMm > 0 && lrBasisWeight > 0, "deformation field learning rates positive");
  require(lrBaCamRot > 0 && lrBaCamTransMm > 0, "BA pose learning rates positive");
  require(beta > 0 && etaDecay >= 0 && aggEps > 0, "responsibility constants");
  require(piDeform > 0 && piDeform < 1, "pi_deform in (0, 1)");
  require(deltaCov > 0 && tauRgb > 0 && tauProb > 0 && tauProb < 1 && tauErr > 0, "densification thresholds");
  require(etaMu > 0 && etaSigma > 0 && deltaAct > 0 && deltaAct < 1, "merge/prune thresholds");
  require(extensionStride >= 1, "extension_stride >= 1");
  require(tauNewTransmittance > 0 && tauNewTransmittance <= 1, "tau_new_transmittance in (0, 1]");
  require(newPrimWd > 0 && newPrimWd < 1, "new_prim_wd in (0, 1)");
  require(initBasesPerAttr >= 1 && basisExtentFactor > 0, "initial basis layout");
  require(knn >= 1, "knn >= 1");
  require(initFirstFrameIters >= 0, "init_first_frame_iters >= 0");
  require(initSsimLambda >= 0 && initSsimLambda <= 1, "init_ssim_lambda in [0, 1]");
  require(priorSource == "files", "prior_source must be 'files'");
  require(threads >= 0, "threads >= 0");
}

void RunConfig::applyKeyValue(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw std::invalid_argument("RunConfig: unknown key '" + key + "'");
  try {
    it->second.set(*this, value);
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("RunConfig: bad value for '" + key + "': " + value);
  }
}

void RunConfig::applyFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("RunConfig: cannot open " + path);
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string trimmed;
    std::istringstream probe(line);
    probe >> trimmed;
    if (trimmed.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("RunConfig: malformed line " + std::to_string(lineNo) + " in " + path);
    std::istringstream ks(line.substr(0, eq));
    std::string key;
    ks >> key;
    std::istringstream vs(line.substr(eq + 1));
    std::string value;
    vs >> value;
    applyKeyValue(key, value);
  }
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("RunConfig: cannot write " + path);
  for (const auto& [key, field] : fields()) out << key << " = " << field.get(*this) << "\n";
}

}  // namespace nrgs
