#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output;
};

CliResult run_cli(const std::string& args, const std::string& env = "") {
    std::string cmd = env + " " + std::string(VECO_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CliResult result;
    char buf[512];
    while (fgets(buf, sizeof(buf), pipe)) result.output += buf;
    int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_config(const fs::path& path) {
    std::ofstream os(path);
    os << R"({
  "model": {"num_layers": 1, "d_model": 16, "head_count": 2, "d_ff": 32,
            "vocab_size": 32, "max_seq_len": 24},
  "data": {
    "content_vocab": 27,
    "mono": [{"name": "a", "documents": 20, "sentences_per_document": 5,
              "len_lo": 3, "len_hi": 6, "content_lo": 5, "content_hi": 31}],
    "pairs": [{"name": "ab", "transform": "shift", "shift_k": 3, "num_pairs": 250,
               "len_lo": 4, "len_hi": 4, "content_lo": 5, "content_hi": 31}]
  },
  "pretrain": {"phase1_steps": 30, "phase2_steps": 270, "batch_pairs": 4,
               "warmup_steps": 30, "peak_lr": 0.001, "ckpt_every": 100},
  "finetune": {"mt": {"steps": 300, "batch_pairs": 4, "eval_every": 150,
                      "peak_lr": 0.002, "warmup_steps": 30,
                      "dev_fraction": 0.1, "max_decode_len": 8, "dev_pairs": 16}}
})";
}

}  // namespace

TEST_CASE("cli: usage errors exit 2, data errors exit 3") {
    CHECK(run_cli("no-such-command").exit_code == 2);
    CHECK(run_cli("pretrain").exit_code == 2);  // missing required options
    fs::path dir = fresh_dir("veco_cli_err");
    CliResult missing = run_cli("inspect-ckpt --ckpt " + (dir / "nope.veco").string());
    CHECK(missing.exit_code == 3);
    CHECK(missing.output.find("\"code\":3") != std::string::npos);
}

TEST_CASE("cli: full pipeline smoke with reproducibility checks") {
    fs::path dir = fresh_dir("veco_cli_pipe");
    fs::path cfg = dir / "cfg.json";
    write_config(cfg);
    std::string base = "--config " + cfg.string();

    // synth-data is deterministic per seed.
    REQUIRE(run_cli("synth-data " + base + " --out " + (dir / "data").string() + " --seed 7")
                .exit_code == 0);
    REQUIRE(run_cli("synth-data " + base + " --out " + (dir / "data2").string() + " --seed 7")
                .exit_code == 0);
    CHECK(slurp(dir / "data" / "pair.ab.src.txt") == slurp(dir / "data2" / "pair.ab.src.txt"));

    // pretrain --steps 0 writes the initial checkpoint and a header-only metrics file.
    REQUIRE(run_cli("pretrain " + base + " --data " + (dir / "data").string() + " --out " +
                    (dir / "pre0").string() + " --seed 7 --steps 0")
                .exit_code == 0);
    std::string metrics0 = slurp(dir / "pre0" / "metrics.tsv");
    CHECK(metrics0 == "step\tkind\tlr\tx_self\tx_cross\ty_self\ty_cross\ttlm\ttotal\n");
    CHECK(fs::exists(dir / "pre0" / "checkpoint.veco"));

    // inspect-ckpt lists every tensor of the configured model.
    CliResult inspect =
        run_cli("inspect-ckpt --ckpt " + (dir / "pre0" / "checkpoint.veco").string());
    REQUIRE(inspect.exit_code == 0);
    for (const char* name :
         {"embed.tokens\t[32,16]", "embed.positions\t[24,16]", "layers.0.self_attn.wq\t[16,16]",
          "layers.0.cross_attn.wq\t[16,16]", "layers.0.ln_cross.gain\t[16]", "layers.0.ffn.w1",
          "out.proj\t[16,32]", "out.bias\t[32]"}) {
        CHECK(inspect.output.find(name) != std::string::npos);
    }

    // Full pretrain, twice, bit-identical artifacts for the same seed.
    REQUIRE(run_cli("pretrain " + base + " --data " + (dir / "data").string() + " --out " +
                    (dir / "pre").string() + " --seed 7")
                .exit_code == 0);
    REQUIRE(run_cli("pretrain " + base + " --data " + (dir / "data").string() + " --out " +
                    (dir / "preB").string() + " --seed 7")
                .exit_code == 0);
    CHECK(slurp(dir / "pre" / "metrics.tsv") == slurp(dir / "preB" / "metrics.tsv"));
    CHECK(slurp(dir / "pre" / "checkpoint.veco") == slurp(dir / "preB" / "checkpoint.veco"));

    // Re-running from the echoed resolved config reproduces the artifacts.
    REQUIRE(run_cli("pretrain --config " + (dir / "pre" / "resolved_config.json").string() +
                    " --data " + (dir / "data").string() + " --out " + (dir / "preC").string() +
                    " --seed 7")
                .exit_code == 0);
    CHECK(slurp(dir / "pre" / "checkpoint.veco") == slurp(dir / "preC" / "checkpoint.veco"));

    // finetune-mt from the pretrained checkpoint.
    REQUIRE(run_cli("finetune-mt " + base + " --data " + (dir / "data").string() + " --ckpt " +
                    (dir / "pre" / "checkpoint.veco").string() + " --out " + (dir / "mt").string() +
                    " --seed 7")
                .exit_code == 0);
    CHECK(fs::exists(dir / "mt" / "mt_model.veco"));
    CHECK(fs::exists(dir / "mt" / "param_report.txt"));

    // translate a few held-out sources, line-aligned output.
    {
        std::ifstream src_in(dir / "data" / "pair.ab.src.txt");
        std::ofstream src_out(dir / "src.txt");
        std::ifstream ref_in(dir / "data" / "pair.ab.tgt.txt");
        std::ofstream ref_out(dir / "ref.txt");
        std::string line;
        for (int i = 0; i < 8 && std::getline(src_in, line); ++i) src_out << line << '\n';
        for (int i = 0; i < 8 && std::getline(ref_in, line); ++i) ref_out << line << '\n';
    }
    REQUIRE(run_cli("translate --ckpt " + (dir / "mt" / "mt_model.veco").string() + " --vocab " +
                    (dir / "data" / "vocab.txt").string() + " --in " + (dir / "src.txt").string() +
                    " --out " + (dir / "trans").string() + " --beam 3 --max-len 8")
                .exit_code == 0);
    {
        std::ifstream hyp(dir / "trans" / "hypotheses.txt");
        int lines = 0;
        std::string line;
        while (std::getline(hyp, line)) ++lines;
        CHECK(lines == 8);
    }

    // eval-bleu emits a score in [0,1].
    CliResult bleu_out = run_cli("eval-bleu --hyp " + (dir / "trans" / "hypotheses.txt").string() +
                                 " --ref " + (dir / "ref.txt").string() + " --vocab " +
                                 (dir / "data" / "vocab.txt").string() + " --out " +
                                 (dir / "bleu").string());
    REQUIRE(bleu_out.exit_code == 0);
    double score = std::stod(bleu_out.output.substr(0, bleu_out.output.find('\t')));
    CHECK(score >= 0.0);
    CHECK(score <= 1.0);

    // export-attn writes a TSV whose rows sum to 1.
    REQUIRE(run_cli("export-attn --ckpt " + (dir / "pre" / "checkpoint.veco").string() +
                    " --vocab " + (dir / "data" / "vocab.txt").string() +
                    " --x 'w5 w6 w7' --y 'w8 w9' --layer 0 --stream s-cross --out " +
                    (dir / "attn").string())
                .exit_code == 0);
    {
        std::ifstream tsv(dir / "attn" / "attention.tsv");
        std::string header;
        std::getline(tsv, header);
        CHECK(header.find("<bos>") != std::string::npos);
        std::string row;
        while (std::getline(tsv, row)) {
            std::istringstream cells(row);
            std::string label;
            std::getline(cells, label, '\t');
            double total = 0.0, v = 0.0;
            while (cells >> v) total += v;
            CHECK(total == doctest::Approx(1.0).epsilon(1e-4));  // 6-decimal cells
        }
    }

    // avg-ckpt of a checkpoint with itself loads and matches.
    REQUIRE(run_cli("avg-ckpt --out " + (dir / "avg").string() + " " +
                    (dir / "pre" / "checkpoint.veco").string() + " " +
                    (dir / "pre" / "checkpoint.veco").string())
                .exit_code == 0);
    CHECK(fs::exists(dir / "avg" / "averaged.veco"));

    fs::remove_all(dir);
}

TEST_CASE("cli: VECO_SEED env var is the seed default") {
    fs::path dir = fresh_dir("veco_cli_env");
    fs::path cfg = dir / "cfg.json";
    write_config(cfg);
    REQUIRE(run_cli("synth-data --config " + cfg.string() + " --out " + (dir / "a").string(),
                    "VECO_SEED=99").exit_code == 0);
    REQUIRE(run_cli("synth-data --config " + cfg.string() + " --out " + (dir / "b").string() +
                    " --seed 99").exit_code == 0);
    CHECK(slurp(dir / "a" / "pair.ab.src.txt") == slurp(dir / "b" / "pair.ab.src.txt"));
    fs::remove_all(dir);
}

TEST_CASE("cli: unknown config keys are rejected") {
    fs::path dir = fresh_dir("veco_cli_badcfg");
    std::ofstream(dir / "bad.json") << R"({"model": {"layers": 2}})";
    CliResult result = run_cli("synth-data --config " + (dir / "bad.json").string() + " --out " +
                               (dir / "out").string());
    CHECK(result.exit_code == 3);
    CHECK(result.output.find("unknown config key") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out" / "vocab.txt"));
    fs::remove_all(dir);
}
