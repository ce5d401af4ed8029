#include "hemotrack/video_core.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "hemotrack/common.hpp"

namespace fs = std::filesystem;

namespace hemo::video {

namespace {

std::string frame_name(int idx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d.png", idx);
    return buf;
}

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    HEMO_CHECK(f.good(), "cannot open '", path, "'");
    json j = json::parse(f, nullptr, false);
    HEMO_CHECK(!j.is_discarded(), "unparsable JSON in '", path, "'");
    return j;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    HEMO_CHECK(f.good(), "cannot open '", path, "' for writing");
    f << j.dump(2) << "\n";
    HEMO_CHECK(f.good(), "write to '", path, "' failed");
}

}  // namespace

double Clip::diagonal() const {
    return std::sqrt(double(width()) * width() + double(height()) * height());
}

json labels_to_json(const ClipLabels& l) {
    json j;
    if (l.has_onset())
        j["onset_frame"] = l.onset_frame;
    else
        j["onset_frame"] = nullptr;
    json pts = json::array();
    for (const auto& p : l.points) {
        json pj;
        pj["frame"] = p.frame;
        pj["x"] = p.x;
        pj["y"] = p.y;
        pj["source"] = p.source;
        pts.push_back(pj);
    }
    j["points"] = pts;
    return j;
}

ClipLabels labels_from_json(const json& j) {
    ClipLabels l;
    if (j.contains("onset_frame") && !j.at("onset_frame").is_null())
        l.onset_frame = j.at("onset_frame").get<int>();
    if (j.contains("points"))
        for (const auto& pj : j.at("points")) {
            PointLabel p;
            p.frame = pj.at("frame").get<int>();
            p.x = pj.at("x").get<double>();
            p.y = pj.at("y").get<double>();
            p.source = pj.value("source", "human");
            l.points.push_back(p);
        }
    return l;
}

void save_clip(const std::string& root, const Clip& clip) {
    HEMO_CHECK(!clip.id.empty(), "save_clip: clip id is empty");
    HEMO_CHECK(!clip.frames.empty(), "save_clip: clip '", clip.id, "' has no frames");
    const fs::path dir = fs::path(root) / clip.id;
    const fs::path frames_dir = dir / "frames";
    fs::create_directories(frames_dir);
    for (int i = 0; i < clip.length(); ++i)
        img::save_png((frames_dir / frame_name(i)).string(), clip.frames[i]);

    json meta;
    meta["fps"] = clip.meta.fps;
    meta["patient_id"] = clip.meta.patient_id;
    meta["scenario_tags"] = clip.meta.scenario_tags;
    write_json_file((dir / "meta.json").string(), meta);
    write_json_file((dir / "labels.json").string(), labels_to_json(clip.labels));
}

Clip load_clip(const std::string& clip_dir) {
    const fs::path dir(clip_dir);
    HEMO_CHECK(fs::is_directory(dir), "load_clip: '", clip_dir, "' is not a directory");
    Clip clip;
    clip.id = dir.filename().string();

    const fs::path frames_dir = dir / "frames";
    HEMO_CHECK(fs::is_directory(frames_dir), "load_clip: missing frames/ in '", clip_dir, "'");
    int max_index = -1;
    for (const auto& e : fs::directory_iterator(frames_dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".png") continue;
        max_index = std::max(max_index, std::stoi(e.path().stem().string()));
    }
    HEMO_CHECK(max_index >= 0, "load_clip: no frames in '", clip_dir, "'");
    for (int i = 0; i <= max_index; ++i) {
        const fs::path p = frames_dir / frame_name(i);
        HEMO_CHECK(fs::exists(p), "load_clip: gap at index ", i, " in '", clip_dir, "'");
        clip.frames.push_back(img::load_png(p.string()));
    }
    for (const auto& f : clip.frames)
        HEMO_CHECK(f.w == clip.frames[0].w && f.h == clip.frames[0].h,
                   "load_clip: inconsistent frame sizes in '", clip_dir, "'");

    const json meta = load_json_file((dir / "meta.json").string());
    clip.meta.fps = meta.value("fps", 30);
    clip.meta.patient_id = meta.value("patient_id", std::string());
    if (meta.contains("scenario_tags"))
        clip.meta.scenario_tags = meta.at("scenario_tags").get<std::vector<std::string>>();

    clip.labels = labels_from_json(load_json_file((dir / "labels.json").string()));
    return clip;
}

std::vector<std::string> list_clip_dirs(const std::string& root) {
    HEMO_CHECK(fs::is_directory(root), "list_clip_dirs: '", root, "' is not a directory");
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::is_directory(e.path() / "frames"))
            dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

int random_prefix_drop(Clip& clip, Rng& rng, int max_drop) {
    HEMO_CHECK(max_drop >= 0, "random_prefix_drop: negative max_drop");
    HEMO_CHECK(clip.length() > max_drop, "random_prefix_drop: clip of ", clip.length(),
               " frames cannot absorb a drop of up to ", max_drop);
    const int drop = int(rng.uniform_int(0, max_drop));
    if (drop == 0) return 0;
    clip.frames.erase(clip.frames.begin(), clip.frames.begin() + drop);
    if (clip.labels.has_onset()) {
        // Onset inside the dropped prefix would make the clip bleed from the
        // first frame with an unknowable onset; callers generate clips with
        // onset beyond max_drop, enforce it here.
        HEMO_CHECK(clip.labels.onset_frame >= drop, "random_prefix_drop: onset ",
                   clip.labels.onset_frame, " inside dropped prefix of ", drop);
        clip.labels.onset_frame -= drop;
    }
    std::vector<PointLabel> kept;
    for (auto p : clip.labels.points) {
        p.frame -= drop;
        if (p.frame >= 0) kept.push_back(p);
    }
    clip.labels.points = std::move(kept);
    return drop;
}

DatasetSplit split_dataset(std::vector<std::string> patients, std::array<double, 3> ratio,
                           uint64_t seed, std::optional<std::array<int, 3>> count_override) {
    HEMO_CHECK(!patients.empty(), "split_dataset: no patients");
    {
        auto sorted = patients;
        std::sort(sorted.begin(), sorted.end());
        HEMO_CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
                   "split_dataset: duplicate patient ids");
    }
    // Deterministic Fisher-Yates on the id-sorted list.
    std::sort(patients.begin(), patients.end());
    Rng rng(seed);
    for (size_t i = patients.size(); i > 1; --i)
        std::swap(patients[i - 1], patients[size_t(rng.uniform_int(0, int64_t(i) - 1))]);

    const int n = int(patients.size());
    int n_train, n_val, n_test;
    if (count_override) {
        n_train = (*count_override)[0];
        n_val = (*count_override)[1];
        n_test = (*count_override)[2];
        HEMO_CHECK(n_train >= 0 && n_val >= 0 && n_test >= 0, "split_dataset: negative count");
        HEMO_CHECK(n_train + n_val + n_test <= n, "split_dataset: override counts sum to ",
                   n_train + n_val + n_test, " > ", n, " patients");
    } else {
        const double rsum = ratio[0] + ratio[1] + ratio[2];
        HEMO_CHECK(rsum > 0 && ratio[0] >= 0 && ratio[1] >= 0 && ratio[2] >= 0,
                   "split_dataset: bad ratio");
        // Largest-remainder allocation, then make sure every positive-ratio bucket
        // holds at least one patient when the corpus is big enough to allow it.
        std::array<int, 3> cnt;
        std::array<double, 3> frac;
        int assigned = 0, positive = 0;
        for (int b = 0; b < 3; ++b) {
            const double share = n * ratio[b] / rsum;
            cnt[b] = int(std::floor(share));
            frac[b] = share - cnt[b];
            assigned += cnt[b];
            if (ratio[b] > 0) ++positive;
        }
        for (int left = n - assigned; left > 0; --left) {
            int best = 0;
            for (int b = 1; b < 3; ++b)
                if (frac[b] > frac[best]) best = b;
            ++cnt[best];
            frac[best] = -1;
        }
        if (n >= positive) {
            for (int b = 0; b < 3; ++b) {
                if (ratio[b] <= 0 || cnt[b] > 0) continue;
                int donor = 0;
                for (int d = 1; d < 3; ++d)
                    if (cnt[d] > cnt[donor]) donor = d;
                if (cnt[donor] > 1) --cnt[donor], ++cnt[b];
            }
        }
        n_train = cnt[0], n_val = cnt[1], n_test = cnt[2];
    }

    DatasetSplit s;
    int i = 0;
    for (; i < n_train; ++i) s.train.push_back(patients[i]);
    for (; i < n_train + n_val; ++i) s.val.push_back(patients[i]);
    for (; i < n_train + n_val + n_test; ++i) s.test.push_back(patients[i]);
    for (; i < n; ++i) s.unassigned.push_back(patients[i]);
    return s;
}

void write_split_manifest(const std::string& path, const DatasetSplit& split, uint64_t seed) {
    json j;
    j["seed"] = seed;
    j["train"] = split.train;
    j["val"] = split.val;
    j["test"] = split.test;
    if (!split.unassigned.empty()) j["unassigned"] = split.unassigned;
    write_json_file(path, j);
}

DatasetSplit read_split_manifest(const std::string& path) {
    const json j = load_json_file(path);
    DatasetSplit s;
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    if (j.contains("unassigned"))
        s.unassigned = j.at("unassigned").get<std::vector<std::string>>();
    return s;
}

}  // namespace hemo::video
