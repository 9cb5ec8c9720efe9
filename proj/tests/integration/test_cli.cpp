#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <string>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "wbc/anchor_kmeans.hpp"
#include "wbc/dataset.hpp"
#include "wbc/postprocess.hpp"

namespace wbc {
namespace {

namespace fs = std::filesystem;
using testing::read_text;
using testing::voc_object;
using testing::voc_xml;
using testing::write_text;

int run_cli(const std::string& args) {
    const std::string cmd = std::string(WBC_CLI_PATH) + " --log-level off " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Eight labelled 320x240 images, one WBC each, two per subtype.
fs::path write_fixture(const fs::path& dir) {
    const auto& names = ClassVocabulary::phase2().names();
    DatasetManifest m;
    m.split = Split::Test;
    for (int i = 0; i < 8; ++i) {
        const std::string id = "BloodImage_0000" + std::to_string(i);
        const int x = 30 + 25 * i, y = 40 + 12 * i;
        const std::string xml = voc_xml(id + ".jpg", 320, 240,
                                        voc_object("WBC", x, y, x + 60 + i, y + 70 - i) + voc_object("RBC", 5, 5, 25, 25));
        write_text(dir / "annotations" / (id + ".xml"), xml);
        ManifestEntry e{id, "", names[static_cast<std::size_t>(i % 4)], {320, 240}, parse_voc(xml), ""};
        m.entries.push_back(std::move(e));
    }
    m.recount();
    const fs::path manifest = dir / "manifest.jsonl";
    write_text(manifest, write_manifest_jsonl(m));
    return manifest;
}

class Cli : public ::testing::Test {
 protected:
    void SetUp() override {
        dir_ = testing::scratch_dir(std::string("cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        manifest_ = write_fixture(dir_);
    }
    fs::path dir_, manifest_;
};

TEST_F(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli(""), 2);
    EXPECT_EQ(run_cli("detect --phase 3 --manifest " + q(manifest_) + " --out " + q(dir_ / "o")), 2);
    EXPECT_EQ(run_cli("detect --manifest " + q(dir_ / "missing.jsonl") + " --out " + q(dir_ / "o")), 2);
    EXPECT_EQ(run_cli("eval --mode bogus --preds x --truth y --out " + q(dir_ / "o")), 2);
}

TEST_F(Cli, AnchorsDeterministic) {
    const std::string base = "anchors --annotations " + q(dir_ / "annotations") + " --k 3 --seed 5 --out ";
    ASSERT_EQ(run_cli(base + q(dir_ / "a1")), 0);
    ASSERT_EQ(run_cli(base + q(dir_ / "a2")), 0);
    const std::string a1 = read_text(dir_ / "a1" / "anchors.txt");
    EXPECT_EQ(a1, read_text(dir_ / "a2" / "anchors.txt"));
    EXPECT_EQ(read_anchor_file(a1).size(), 3u);
    EXPECT_EQ(std::count(a1.begin(), a1.end(), '#'), 3);

    ASSERT_EQ(run_cli("anchors --annotations " + q(dir_ / "annotations") + " --k 6 --class wbc --out " + q(dir_ / "a3")), 0);
    EXPECT_EQ(read_anchor_file(read_text(dir_ / "a3" / "anchors.txt")).size(), 6u);
}

TEST_F(Cli, AnchorsInsufficientData) {
    const fs::path ann = dir_ / "two";
    write_text(ann / "a.xml", voc_xml("a.jpg", 320, 240, voc_object("WBC", 10, 10, 50, 60)));
    write_text(ann / "b.xml", voc_xml("b.jpg", 320, 240, voc_object("WBC", 10, 10, 80, 90)));
    EXPECT_EQ(run_cli("anchors --annotations " + q(ann) + " --k 3 --out " + q(dir_ / "o")), 2);
}

TEST_F(Cli, DetectPhaseOneIsSingleClass) {
    ASSERT_EQ(run_cli("detect --phase 1 --manifest " + q(manifest_) + " --out " + q(dir_ / "p1")), 0);
    const auto recs = parse_records(read_text(dir_ / "p1" / "detections.txt"));
    ASSERT_EQ(recs.size(), 8u);
    for (const auto& r : recs) EXPECT_EQ(r.class_name, "WBC");
    const auto ts = read_manifest_jsonl(read_text(dir_ / "p1" / "phase2_trainset.jsonl"));
    EXPECT_EQ(ts.entries.size(), 8u);
    EXPECT_EQ(ts.per_class_counts.at("Monocyte"), 2u);
}

TEST_F(Cli, DetectAndEvaluateEndToEnd) {
    ASSERT_EQ(run_cli("detect --phase 1 --manifest " + q(manifest_) + " --out " + q(dir_ / "p1")), 0);
    ASSERT_EQ(run_cli("detect --phase 2 --workers 3 --manifest " + q(manifest_) + " --phase1-detections " +
                      q(dir_ / "p1" / "detections.txt") + " --out " + q(dir_ / "p2")),
              0);
    const auto recs = parse_records(read_text(dir_ / "p2" / "detections.txt"));
    ASSERT_EQ(recs.size(), 8u);
    const auto overlay = nlohmann::json::parse(read_text(dir_ / "p2" / "overlay.json"));
    ASSERT_EQ(overlay["images"].size(), 8u);
    for (const auto& img : overlay["images"]) {
        ASSERT_EQ(img["boxes"].size(), 1u);
        EXPECT_TRUE(img["boxes"][0]["phase1_box"].is_string());
    }

    for (const std::string mode : {"detection", "classification"}) {
        const fs::path out = dir_ / ("eval_" + mode);
        ASSERT_EQ(run_cli("eval --mode " + mode + " --preds " + q(dir_ / "p2" / "detections.txt") + " --truth " +
                          q(manifest_) + " --out " + q(out)),
                  0);
        const std::string csv = read_text(out / "report.csv");
        EXPECT_EQ(csv,
                  "class,F1,Precision,Recall,Support\n"
                  "Eosinophil,1.0000,1.0000,1.0000,2\n"
                  "Lymphocyte,1.0000,1.0000,1.0000,2\n"
                  "Monocyte,1.0000,1.0000,1.0000,2\n"
                  "Neutrophil,1.0000,1.0000,1.0000,2\n")
            << mode;
        const auto rep = nlohmann::json::parse(read_text(out / "report.json"));
        EXPECT_EQ(rep["overall_accuracy"], 1.0);
        EXPECT_EQ(rep["config"]["command"], "eval");
    }
}

TEST_F(Cli, ConfidenceOneGivesNoDetections) {
    ASSERT_EQ(run_cli("detect --conf 1.0 --manifest " + q(manifest_) + " --out " + q(dir_ / "c")), 0);
    EXPECT_EQ(read_text(dir_ / "c" / "detections.txt"), "");
}

TEST_F(Cli, RunJsonReproducesOutputs) {
    ASSERT_EQ(run_cli("detect --phase 2 --seed 9 --nms 0.5 --manifest " + q(manifest_) + " --out " + q(dir_ / "r1")), 0);
    ASSERT_EQ(run_cli("detect --config " + q(dir_ / "r1" / "run.json") + " --out " + q(dir_ / "r2")), 0);
    for (const char* f : {"detections.txt", "overlay.json", "run.json"})
        EXPECT_EQ(read_text(dir_ / "r1" / f), read_text(dir_ / "r2" / f)) << f;
    const auto run = nlohmann::json::parse(read_text(dir_ / "r1" / "run.json"));
    EXPECT_EQ(run["seed"], 9);
    EXPECT_EQ(run["nms"], 0.5);
    EXPECT_EQ(run["head"]["depth"], 27);
    // a config for another command is rejected
    EXPECT_EQ(run_cli("eval --config " + q(dir_ / "r1" / "run.json") + " --out " + q(dir_ / "r3")), 2);
}

TEST_F(Cli, TensorBackboneSkipsMissingFiles) {
    const fs::path tensors = dir_ / "tensors";
    fs::create_directories(tensors);
    EXPECT_EQ(run_cli("detect --backbone tensors --tensor-dir " + q(tensors) + " --manifest " + q(manifest_) +
                      " --out " + q(dir_ / "t")),
              2);
    const auto overlay = nlohmann::json::parse(read_text(dir_ / "t" / "overlay.json"));
    EXPECT_EQ(overlay["skipped"].size(), 8u);
}

TEST_F(Cli, EvalExcludesUnknownImages) {
    write_text(dir_ / "preds.txt", "BloodImage_00000 Eosinophil 0.9000 30 40 90 110\nnope Eosinophil 0.9 1 1 5 5\n");
    EXPECT_EQ(run_cli("eval --mode detection --preds " + q(dir_ / "preds.txt") + " --truth " + q(manifest_) + " --out " +
                      q(dir_ / "e")),
              3);
    EXPECT_TRUE(fs::exists(dir_ / "e" / "report.csv"));
}

}  // namespace
}  // namespace wbc
