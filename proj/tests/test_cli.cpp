#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "fixtures.hpp"
#include "stylebend/checkpoint.hpp"
#include "stylebend/harness.hpp"

using namespace stylebend;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run cli(const std::string& args, const fs::path& scratch, const std::string& env = "") {
    const fs::path log = scratch / "cli.log";
    const std::string cmd = env + (env.empty() ? "" : " ") + STYLEBEND_CLI + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.out = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    sbtest::TempDir dir("cli-usage");
    const std::string d = dir.path().string();
    CHECK(cli("", dir.path()).code == 2);
    CHECK(cli("bogus", dir.path()).code == 2);
    CHECK(cli("generate --manifest " + d + "/none.json --out " + d + "/x", dir.path()).code == 2);
    auto r = cli("train --phase baseline --data " + d + "/nowhere --out " + d + "/t", dir.path());
    CHECK(r.code == 2);
    CHECK(r.out.find("manifest") != std::string::npos);
    CHECK(cli("train --phase sideways", dir.path()).code == 2);
    CHECK(cli("eval --checkpoint " + d + "/none.bin --data " + d, dir.path()).code == 2);
    CHECK(cli("--help", dir.path()).code == 0);
}

TEST_CASE("generate, train, eval and stats end to end") {
    sbtest::TempDir dir("cli-e2e");
    const std::string d = dir.path().string();
    save_manifest(sbtest::tiny_manifest(), dir / "tiny.json");

    auto dry = cli("generate --manifest " + d + "/tiny.json --out " + d + "/data --dry-run", dir.path());
    CHECK(dry.code == 0);
    CHECK(dry.out.find("dry run: train files 32, test files 48, val files 24, episodes 32") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "data"));

    auto gen = cli("generate --manifest " + d + "/tiny.json --out " + d + "/data --jobs 2", dir.path());
    REQUIRE(gen.code == 0);
    CHECK(gen.out.find("content hash " + content_hash(dir / "data")) != std::string::npos);

    TrainConfig cfg;
    cfg.precision = Precision::Double;
    cfg.model.encoder.channels = {4, 6, 8};
    cfg.baseline_epochs = 1;
    cfg.adapter_epochs = 1;
    cfg.episodes_per_epoch = 4;
    cfg.batch_size = 2;
    cfg.data_dir = d + "/data";
    save_config(cfg, dir / "cfg.json");
    const std::string conf = "--config " + d + "/cfg.json ";

    auto base = cli("train " + conf + "--phase baseline --out " + d + "/base", dir.path(), "STYLEBEND_SEED=17");
    REQUIRE(base.code == 0);
    CHECK(load_config(dir / "base/config.json").seed == 17);
    CHECK(fs::exists(dir / "base/steps.csv"));
    const fs::path ck = dir / "base/checkpoint.bin";
    REQUIRE(fs::exists(ck));

    auto resume = cli("train " + conf + "--phase adapter --epochs 0 --init " + ck.string() + " --out " + d + "/resume",
                      dir.path(), "STYLEBEND_SEED=17");
    REQUIRE(resume.code == 0);
    CHECK(slurp(dir / "resume/checkpoint.bin") == slurp(ck));

    CHECK(cli("train " + conf + "--phase adapter --out " + d + "/noinit", dir.path()).code == 2);

    auto eval = cli("eval " + conf + "--checkpoint " + ck.string() + " --out " + d + "/eval --rectify both", dir.path(),
                    "STYLEBEND_SEED=17");
    REQUIRE(eval.code == 0);
    std::ifstream summary(dir / "eval/summary.csv");
    std::string header, row_off, row_on;
    std::getline(summary, header);
    CHECK(header == "style_id,shots,rectify,miou,episodes");
    std::getline(summary, row_off);
    std::getline(summary, row_on);
    auto cells = [](const std::string& r) {
        std::vector<std::string> out;
        std::stringstream ss(r);
        for (std::string c; std::getline(ss, c, ',');) out.push_back(c);
        return out;
    };
    auto off = cells(row_off), on = cells(row_on);
    REQUIRE(off.size() == 5);
    REQUIRE(on.size() == 5);
    CHECK(off[0] == on[0]);
    CHECK(off[2] == "0");
    CHECK(on[2] == "1");
    // Fresh adapter: rectify on and off report the same mIoU.
    CHECK(off[3] == on[3]);
    CHECK(off[4] == "6");
    CHECK(cli("eval " + conf + "--checkpoint " + ck.string() + " --shots 5 --out " + d + "/e5", dir.path()).code == 2);

    auto stats = cli("stats " + conf + "--checkpoint " + ck.string() + " --stage 1 --stat std --out " + d + "/stats",
                     dir.path(), "STYLEBEND_SEED=17");
    REQUIRE(stats.code == 0);
    std::ifstream sf(dir / "stats/stats_stage1_source_std.csv");
    std::string first;
    std::getline(sf, first);
    CHECK(first == "row_kind,sample_id,c0,c1,c2,c3,c4,c5");
    CHECK(cli("stats " + conf + "--checkpoint " + ck.string() + " --stage 7 --out " + d + "/s7", dir.path(),
              "STYLEBEND_SEED=17").code == 2);
}

TEST_CASE("verify suites") {
    sbtest::TempDir dir("cli-verify");
    auto r = cli("verify --suite bank --out " + dir.path().string(), dir.path());
    CHECK(r.code == 0);
    CHECK(fs::exists(dir / "verify.txt"));
    CHECK(cli("verify --suite nonsense", dir.path()).code == 2);
}
