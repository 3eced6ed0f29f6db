#include "nrgs/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "nrgs/image_io.hpp"
#include "nrgs/map_io.hpp"
#include "nrgs/random.hpp"
#include "nrgs/trajectory_io.hpp"

namespace nrgs {

namespace {

std::string frameName(int f) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d", f);
  return buf;
}

}  // namespace

Dataset Dataset::open(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir) || !fs::exists(dir + "/intrinsics.txt") || !fs::exists(dir + "/rgb"))
    throw std::runtime_error("DatasetNotFound: " + dir);
  Dataset d;
  d.dir = dir;
  d.K = Intrinsics::load(dir + "/intrinsics.txt");
  int f = 0;
  while (fs::exists(dir + "/rgb/" + frameName(f) + ".png")) ++f;
  d.frames = f;
  if (d.frames < 2) throw std::runtime_error("DatasetNotFound: fewer than 2 rgb frames in " + dir);
  return d;
}

Image Dataset::loadImage(int frame) const { return loadPng8(dir + "/rgb/" + frameName(frame) + ".png"); }

namespace {

struct PipelineState {
  Dataset dataset;
  RunConfig cfg;
  PriorProvider* provider = nullptr;
  std::unique_ptr<PriorProvider> ownedProvider;

  CanonicalMap map;
  KeyframeWindow window;
  ResidualStore residuals;
  int mapVersion = 0;

  std::vector<Pose> camFromWorld;  // per frame, latest estimate
  std::vector<Pose> kfPoseByFrame;

  // caches keyed by map version
  struct CachedRender {
    int frame = -1;
    int version = -1;
    RenderOutput out;
  };
  CachedRender keyframeRender;               // adjacent keyframe depth+confidence
  std::map<int, CachedRender> seedRenders;   // per track epoch

  std::ofstream trackingLog, managementLog, baLog;
};

const RenderOutput& keyframeRenderFor(PipelineState& st, const Keyframe& kf) {
  auto& c = st.keyframeRender;
  if (c.frame == kf.frame && c.version == st.mapVersion) return c.out;
  DeformOptions dopt;
  dopt.t = kf.time;
  dopt.residuals = findResiduals(st.residuals, kf.frame);
  RenderOptions ro;
  ro.confidence = true;
  ro.workers = st.cfg.threads;
  c.out = render(deformMap(st.map, dopt).gaussians, kf.K, kf.camFromWorld, ro);
  c.frame = kf.frame;
  c.version = st.mapVersion;
  return c.out;
}

const RenderOutput* seedRenderFor(PipelineState& st, int seedFrame) {
  if (seedFrame < 0 || seedFrame >= static_cast<int>(st.camFromWorld.size())) return nullptr;
  auto& c = st.seedRenders[seedFrame];
  if (c.frame == seedFrame && c.version == st.mapVersion) return &c.out;
  DeformOptions dopt;
  dopt.t = st.dataset.time(seedFrame);
  dopt.residuals = findResiduals(st.residuals, seedFrame);
  RenderOptions ro;
  ro.workers = st.cfg.threads;
  c.out = render(deformMap(st.map, dopt).gaussians, st.dataset.K, st.camFromWorld[seedFrame], ro);
  c.frame = seedFrame;
  c.version = st.mapVersion;
  return &c.out;
}

int dominantSeed(const std::vector<Track>& tracks) {
  std::map<int, int> counts;
  for (const Track& t : tracks) ++counts[t.t0Frame];
  int best = -1, n = 0;
  for (const auto& [f, c] : counts)
    if (c > n) {
      best = f;
      n = c;
    }
  return best;
}

double covisRatioOf(const MaskSet& masks) {
  size_t num = 0, den = 0;
  for (int y = 0; y < masks.valid.height(); ++y)
    for (int x = 0; x < masks.valid.width(); ++x) {
      if (!masks.valid.at(x, y) || !masks.trackMask.at(x, y)) continue;
      ++den;
      if (masks.covis.at(x, y)) ++num;
    }
  return den == 0 ? 1.0 : static_cast<double>(num) / den;
}

void dumpChannels(const std::string& outDir, int frame, const RenderOutput& out) {
  namespace fs = std::filesystem;
  fs::create_directories(outDir + "/channels");
  const std::string base = outDir + "/channels/" + frameName(frame);
  savePng8(base + "_rgb.png", out.rgb);
  saveDepthPng16(base + "_depth.png", out.depth);
  Image t8(out.transmittance.width(), out.transmittance.height(), 1);
  for (size_t i = 0; i < t8.size(); ++i) t8.data()[i] = out.transmittance.data()[i];
  savePng8(base + "_transmittance.png", t8);
  if (!out.confidence.empty()) savePng8(base + "_confidence.png", out.confidence);
}

void writePoseRow(std::ofstream& log, const Pose& camToWorld) {
  char buf[256];
  const Quat& q = camToWorld.rotation();
  std::snprintf(buf, sizeof(buf), "%.9f,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f", camToWorld.translation().x(),
                camToWorld.translation().y(), camToWorld.translation().z(), q.x(), q.y(), q.z(), q.w());
  log << buf;
}

void logManagement(PipelineState& st, int frame, const ManagementReport& rep) {
  for (int a = 0; a < kNumAttrs; ++a) {
    const auto& r = rep.attr[a];
    st.managementLog << frame << ',' << attrName(static_cast<Attr>(a)) << ',' << r.insertedCoverage << ','
                     << r.insertedError << ',' << r.merged << ',' << r.pruned << ',' << r.frozen << "\n";
  }
}

void logBa(PipelineState& st, int frame, const std::vector<double>& trace) {
  char buf[64];
  for (size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%d,%zu,%.9g\n", frame, i, trace[i]);
    st.baLog << buf;
  }
}

}  // namespace

RunArtifacts runPipeline(const RunConfig& cfg, PriorProvider* provider) {
  cfg.validate();
  namespace fs = std::filesystem;

  PipelineState st;
  st.cfg = cfg;
  st.dataset = Dataset::open(cfg.datasetDir);
  if (provider) {
    st.provider = provider;
  } else {
    st.ownedProvider = std::make_unique<FilePriorProvider>(cfg.datasetDir, st.dataset.K.width, st.dataset.K.height);
    st.provider = st.ownedProvider.get();
  }

  if (cfg.outputDir.empty()) throw std::invalid_argument("runPipeline: output_dir is required");
  fs::create_directories(cfg.outputDir);
  st.trackingLog.open(cfg.outputDir + "/tracking_log.csv");
  st.trackingLog << "frame,tx,ty,tz,qx,qy,qz,qw,inlier_ratio,coarse_fallback,loss_first,loss_final,covis_ratio,"
                    "rdef,kf_reason\n";
  st.managementLog.open(cfg.outputDir + "/management_log.csv");
  st.managementLog << "frame,attr,inserted_cov,inserted_err,merged,pruned,frozen\n";
  st.baLog.open(cfg.outputDir + "/ba_log.csv");
  st.baLog << "frame,iter,loss\n";
  cfg.save(cfg.outputDir + "/config_used.txt");

  const int M = std::min(cfg.windowSize, st.dataset.frames);
  if (M < 2) throw std::runtime_error("DatasetNotFound: dataset too short for initialization");

  auto acquire = [&](int f) {
    try {
      return st.provider->acquire(f);
    } catch (const std::exception& e) {
      throw std::runtime_error("PriorMissing at frame " + std::to_string(f) + ": " + e.what());
    }
  };

  // ---- initialization over the first M frames
  std::vector<InitFrame> initFrames(M);
  for (int f = 0; f < M; ++f) {
    InitFrame& fr = initFrames[f];
    fr.frame = f;
    fr.time = st.dataset.time(f);
    fr.K = st.dataset.K;
    fr.image = st.dataset.loadImage(f);
    fr.valid = validityMask(fr.image, cfg.validDelta);
    fr.priors = acquire(f);
  }
  InitResult init = initializeSystem(initFrames, st.window, st.residuals, cfg);
  st.map = std::move(init.map);
  st.mapVersion = 1;

  st.camFromWorld.resize(st.dataset.frames);
  for (int f = 0; f < M; ++f) st.camFromWorld[f] = st.window.entries[f].camFromWorld;
  logBa(st, M - 1, init.ba.lossTrace);
  if (init.ba.managementRan) logManagement(st, M - 1, init.ba.management);
  for (int f = 0; f < M; ++f) {
    st.trackingLog << f << ',';
    writePoseRow(st.trackingLog, st.camFromWorld[f].inverse());
    st.trackingLog << ",1.0,0,0,0,1.0,0,init\n";
  }

  int lastKeyframeFrame = M - 1;
  int keyframeCount = M;

  // ---- main loop
  for (int f = M; f < st.dataset.frames; ++f) {
    const double t = st.dataset.time(f);
    const Image image = st.dataset.loadImage(f);
    const Priors priors = acquire(f);

    // constant-velocity prediction
    Pose predicted = st.camFromWorld[f - 1];
    if (f >= 2) predicted = (st.camFromWorld[f - 1] * st.camFromWorld[f - 2].inverse()) * st.camFromWorld[f - 1];

    const ResidualSet* prevResiduals = findResiduals(st.residuals, f - 1);
    const PreprocessResult pre =
        preprocessFrame(st.map, prevResiduals, t, predicted, st.dataset.K, image, priors.tracks, cfg);

    // coarse pose from keyframe-to-current track correspondences
    Keyframe& ak = st.window.back();
    const RenderOutput& akRender = keyframeRenderFor(st, ak);
    std::vector<std::pair<Vec2, Vec2>> corr;
    {
      std::map<int, const Track*> akTracks;
      for (const Track& tr : ak.tracks) akTracks[tr.id] = &tr;
      for (const Track& tr : priors.tracks) {
        const auto it = akTracks.find(tr.id);
        if (it == akTracks.end()) continue;
        corr.emplace_back(it->second->ut, tr.ut);
      }
    }
    const CoarsePoseResult coarse = coarsePose(corr, akRender.depth, akRender.confidence, ak.camFromWorld.inverse(),
                                               st.dataset.K, cfg, predicted, deriveSeed(cfg.seed, 0xC0A5 + f));

    // rigidity weight map at the coarse pose
    Image rigidityWeight;
    if (cfg.confidenceWeighting) {
      DeformOptions dopt;
      dopt.t = t;
      dopt.residuals = prevResiduals;
      RenderOptions ro;
      ro.confidence = true;
      ro.keepContributors = false;
      ro.workers = cfg.threads;
      const RenderOutput conf = render(deformMap(st.map, dopt).gaussians, st.dataset.K, coarse.camFromWorld, ro);
      rigidityWeight = Image(st.dataset.K.width, st.dataset.K.height, 1);
      for (size_t i = 0; i < rigidityWeight.size(); ++i)
        rigidityWeight.data()[i] = 1.0 - conf.confidence.data()[i];
    }

    FrameObjective obj;
    obj.map = &st.map;
    obj.residuals = prevResiduals;
    obj.t = t;
    obj.K = st.dataset.K;
    obj.image = &image;
    obj.valid = &pre.masks.valid;
    obj.covis = &pre.masks.covis;
    obj.rigidityWeight = cfg.confidenceWeighting ? &rigidityWeight : nullptr;
    obj.priorDepth = &priors.depth;
    obj.workers = cfg.threads;
    const int seed = dominantSeed(priors.tracks);
    if (seed >= 0 && seed < f) {
      if (const RenderOutput* sr = seedRenderFor(st, seed)) {
        obj.trackPoints = buildTrackPoints(priors.tracks, seed, *sr, st.camFromWorld[seed].inverse(),
                                           pre.masks.valid, pre.masks.covis);
        obj.tTrack0 = st.dataset.time(seed);
        obj.residualsT0 = findResiduals(st.residuals, seed);
        if (cfg.confidenceWeighting && !rigidityWeight.empty()) {
          for (TrackPoint& p : obj.trackPoints) {
            const int cx = static_cast<int>(std::lround(p.ut.x()));
            const int cy = static_cast<int>(std::lround(p.ut.y()));
            p.pixelWeight = (cx >= 0 && cx < rigidityWeight.width() && cy >= 0 && cy < rigidityWeight.height())
                                ? rigidityWeight.at(cx, cy)
                                : 0.0;
          }
        }
      }
    }

    std::vector<double> lossTrace;
    const Pose refined = refinePose(obj, coarse.camFromWorld, cfg, &lossTrace);
    st.camFromWorld[f] = refined;

    ResidualSet frameResiduals = estimateFrameDeformation(obj, refined, prevResiduals, cfg);
    st.residuals[f] = std::move(frameResiduals);

    // keyframe decision
    KeyframeSignals sig;
    sig.covisRatio = covisRatioOf(pre.masks);
    sig.rDef = relativeResidualRatio(st.residuals[f], st.map, 1e-6);
    sig.translationMm =
        (refined.inverse().translation() - st.camFromWorld[lastKeyframeFrame].inverse().translation()).norm();
    sig.framesSinceKeyframe = f - lastKeyframeFrame;
    const KeyframeReason reason = keyframeDecision(sig, cfg);

    st.trackingLog << f << ',';
    writePoseRow(st.trackingLog, refined.inverse());
    char buf[160];
    std::snprintf(buf, sizeof(buf), ",%.4f,%d,%.9g,%.9g,%.4f,%.6g,%s\n", coarse.inlierRatio,
                  coarse.usedFallback ? 1 : 0, lossTrace.empty() ? 0.0 : lossTrace.front(),
                  lossTrace.empty() ? 0.0 : lossTrace.back(), sig.covisRatio, sig.rDef,
                  keyframeReasonName(reason));
    st.trackingLog << buf;

    if (cfg.dumpChannels) {
      DeformOptions dopt;
      dopt.t = t;
      dopt.residuals = findResiduals(st.residuals, f);
      RenderOptions ro;
      ro.confidence = true;
      ro.keepContributors = false;
      ro.workers = cfg.threads;
      dumpChannels(cfg.outputDir, f, render(deformMap(st.map, dopt).gaussians, st.dataset.K, refined, ro));
    }

    if (reason == KeyframeReason::None) continue;

    // ---- keyframe path: window update, extension, global BA
    Keyframe kf;
    kf.frame = f;
    kf.time = t;
    kf.camFromWorld = refined;
    kf.K = st.dataset.K;
    kf.image = image;
    kf.valid = pre.masks.valid;
    kf.covis = pre.masks.covis;
    kf.priorDepth = priors.depth;
    kf.tracks = priors.tracks;
    kf.trackPoints = obj.trackPoints;
    kf.tTrack0 = obj.tTrack0;
    kf.track0Frame = seed;
    st.window.entries.push_back(std::move(kf));
    if (static_cast<int>(st.window.size()) > cfg.windowSize)
      st.window.entries.erase(st.window.entries.begin());
    ++keyframeCount;
    lastKeyframeFrame = f;

    optimizeWindowPoses(st.window, st.map, st.residuals, cfg);
    for (const Keyframe& w : st.window.entries) st.camFromWorld[w.frame] = w.camFromWorld;

    {
      // transmittance of the current state at the refined keyframe pose
      DeformOptions dopt;
      dopt.t = t;
      dopt.residuals = findResiduals(st.residuals, f);
      RenderOptions ro;
      ro.keepContributors = false;
      ro.workers = cfg.threads;
      const RenderOutput ext = render(deformMap(st.map, dopt).gaussians, st.dataset.K,
                                      st.window.back().camFromWorld, ro);
      extendMap(st.map, st.dataset.K, st.window.back().camFromWorld, ext.transmittance, pre.masks.trackMask,
                priors.depth, image, t, cfg);
    }
    ++st.mapVersion;

    BaResult ba = globalDeformableBA(st.map, st.window, st.residuals, cfg);
    ++st.mapVersion;
    for (const Keyframe& w : st.window.entries) st.camFromWorld[w.frame] = w.camFromWorld;
    logBa(st, f, ba.lossTrace);
    if (ba.managementRan) logManagement(st, f, ba.management);
  }

  // ---- artifacts
  RunArtifacts art;
  art.times.resize(st.dataset.frames);
  art.camToWorld.resize(st.dataset.frames);
  for (int f = 0; f < st.dataset.frames; ++f) {
    art.times[f] = st.dataset.time(f);
    art.camToWorld[f] = st.camFromWorld[f].inverse();
  }
  art.keyframeCount = keyframeCount;
  art.finalActiveBasisCount = totalBasisCount(st.map, true);
  art.finalDeformationProbability.resize(st.map.size());
  art.finalMeans.resize(st.map.size());
  for (size_t i = 0; i < st.map.size(); ++i) {
    art.finalDeformationProbability[i] = st.map.primitives[i].deformationProbability();
    art.finalMeans[i] = st.map.primitives[i].mean;
  }
  art.trajectoryPath = cfg.outputDir + "/trajectory.txt";
  art.mapPath = cfg.outputDir + "/map_final.txt";
  art.residualPath = cfg.outputDir + "/residuals.txt";
  saveTrajectoryTum(art.trajectoryPath, art.camToWorld, art.times);
  saveMapSnapshot(art.mapPath, st.map);
  saveResiduals(art.residualPath, st.residuals);
  return art;
}

RunRender renderRunFrame(const std::string& runDir, const std::string& datasetDir, int frame) {
  const Dataset ds = Dataset::open(datasetDir);
  if (frame < 0 || frame >= ds.frames) throw std::invalid_argument("renderRunFrame: frame out of range");
  const CanonicalMap map = loadMapSnapshot(runDir + "/map_final.txt");
  const auto residuals = loadResiduals(runDir + "/residuals.txt");
  const TrajectoryFile traj = loadTrajectoryTum(runDir + "/trajectory.txt");
  if (static_cast<int>(traj.camToWorld.size()) != ds.frames)
    throw std::runtime_error("renderRunFrame: trajectory length differs from dataset");

  DeformOptions dopt;
  dopt.t = ds.time(frame);
  const auto it = residuals.find(frame);
  dopt.residuals = it == residuals.end() ? nullptr : &it->second;
  RenderOptions ro;
  ro.confidence = true;
  ro.keepContributors = false;
  const RenderOutput out = render(deformMap(map, dopt).gaussians, ds.K, traj.camToWorld[frame].inverse(), ro);
  RunRender rr;
  rr.rgb = out.rgb;
  rr.depth = out.depth;
  rr.transmittance = out.transmittance;
  rr.confidence = out.confidence;
  return rr;
}

EvalReport evaluateRun(const std::string& runDir, const std::string& datasetDir, const std::string& outDir,
                       AteAlignment alignment) {
  const Dataset ds = Dataset::open(datasetDir);
  const TrajectoryFile est = loadTrajectoryTum(runDir + "/trajectory.txt");
  const TrajectoryFile gt = loadTrajectoryTum(datasetDir + "/gt_traj.txt");

  EvalReport rep;
  rep.ateMetrics = ate(est.camToWorld, gt.camToWorld, alignment);

  const CanonicalMap map = loadMapSnapshot(runDir + "/map_final.txt");
  const auto residuals = loadResiduals(runDir + "/residuals.txt");
  for (int f = 0; f < ds.frames; ++f) {
    DeformOptions dopt;
    dopt.t = ds.time(f);
    const auto it = residuals.find(f);
    dopt.residuals = it == residuals.end() ? nullptr : &it->second;
    RenderOptions ro;
    ro.keepContributors = false;
    const RenderOutput out = render(deformMap(map, dopt).gaussians, ds.K, est.camToWorld[f].inverse(), ro);
    const Image observed = ds.loadImage(f);
    rep.psnrPerFrame.push_back(psnr(out.rgb, observed));
    rep.ssimPerFrame.push_back(ssim(out.rgb, observed));
  }
  for (double v : rep.psnrPerFrame) rep.meanPsnr += v;
  for (double v : rep.ssimPerFrame) rep.meanSsim += v;
  rep.meanPsnr /= std::max<size_t>(1, rep.psnrPerFrame.size());
  rep.meanSsim /= std::max<size_t>(1, rep.ssimPerFrame.size());

  if (!outDir.empty()) {
    std::filesystem::create_directories(outDir);
    std::ofstream csv(outDir + "/metrics.csv");
    csv << "frame,ate_mm,psnr_db,ssim\n";
    char buf[128];
    for (int f = 0; f < ds.frames; ++f) {
      std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", f, rep.ateMetrics.perFrameError[f],
                    rep.psnrPerFrame[f], rep.ssimPerFrame[f]);
      csv << buf;
    }
    std::ofstream sum(outDir + "/summary.csv");
    sum << "ate_rmse_mm,ate_sd_mm,mean_psnr_db,mean_ssim\n";
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g\n", rep.ateMetrics.rmse, rep.ateMetrics.sd, rep.meanPsnr,
                  rep.meanSsim);
    sum << buf;
    savePng8(outDir + "/ate_per_frame.png", plotSeries(rep.ateMetrics.perFrameError));
    savePng8(outDir + "/psnr_per_frame.png", plotSeries(rep.psnrPerFrame));
  }
  return rep;
}

}  // namespace nrgs
