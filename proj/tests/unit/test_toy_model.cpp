#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "support.hpp"

using namespace edit;
using namespace edit::testing;
namespace fs = std::filesystem;

TEST_CASE("forward basics") {
    const ToyModel m(tiny_config());
    const ForwardResult all_mask = m.forward(std::vector<int>(10, kMaskToken));
    CHECK(all_mask.logits.rows() == 10);
    CHECK(all_mask.logits.cols() == 24);
    CHECK(all_mask.logits.allFinite());
    CHECK_THROWS_AS(m.forward({1, 2, 99}), Error);
    CHECK_THROWS_AS(m.forward(std::vector<int>(25, 2)), Error);

    const std::vector<int> toks = random_tokens(m.config(), 12, 3);
    const ToyModel same(tiny_config());
    CHECK(m.forward(toks).logits == same.forward(toks).logits);
}

TEST_CASE("LoRA is the identity at init") {
    ToyModel m(tiny_config(2));
    const std::vector<int> toks = random_tokens(m.config(), 12, 4);
    const Mat before = m.forward(toks).logits;
    // A is random at init and B is zero; perturbing A alone changes nothing
    for (ParamRef& r : lora_tensors(m.params()))
        if (r.name.back() == 'A') r.value.array() += 0.5;
    CHECK(m.forward(toks).logits == before);
    randomize_lora(m, 1);
    CHECK_FALSE(m.forward(toks).logits == before);
    m.reset_lora();
    CHECK(m.forward(toks).logits == before);
}

TEST_CASE("gradients match central differences") {
    ToyModel m(tiny_config(5));
    randomize_lora(m, 9);
    const std::vector<int> toks = random_tokens(m.config(), 12, 6, 0.4);
    std::vector<std::pair<int, int>> targets;
    for (int i = 0; i < 12; i += 3) targets.emplace_back(i, 2 + i);
    auto loss = [&] {
        Mat dl;
        return masked_cross_entropy(m.forward(toks, false).logits, targets, dl);
    };
    const ForwardResult fr = m.forward(toks, true);
    Mat dl;
    masked_cross_entropy(fr.logits, targets, dl);
    ModelParams grads = m.zero_like();
    m.backward(fr, dl, grads, GradScope::all);

    const FdReport lora = fd_check(lora_tensors(m.params()), lora_tensors(grads), loss, 20, 1);
    CHECK(lora.checked == 20);
    CHECK(lora.worst_rel < 1e-4);
    const FdReport base = fd_check(base_tensors(m.params()), base_tensors(grads), loss, 20, 2);
    CHECK(base.checked == 20);
    CHECK(base.worst_rel < 1e-4);

    ModelParams lora_only = m.zero_like();
    m.backward(fr, dl, lora_only, GradScope::lora);
    CHECK(lora_only.tok_emb.isZero());
    CHECK(lora_only.layers[0].lora[1].b == grads.layers[0].lora[1].b);

    CHECK_THROWS_AS(m.backward(m.forward(toks, false), dl, grads, GradScope::all), Error);
}

TEST_CASE("perfect logits give near-zero gradient") {
    Mat logits = Mat::Zero(2, 5);
    logits(0, 3) = 60;
    logits(1, 2) = 60;
    Mat dl;
    const double loss = masked_cross_entropy(logits, {{0, 3}, {1, 2}}, dl);
    CHECK(loss < 1e-20);
    CHECK(dl.cwiseAbs().maxCoeff() < 1e-20);
}

TEST_CASE("taps and pins") {
    ToyModel m(tiny_config(3));
    randomize_lora(m, 2);
    const std::vector<int> toks = random_tokens(m.config(), 10, 8, 0.0);
    const ForwardResult fr = m.forward(toks, false);
    TapSpec b;  // last layer, q, B branch
    TapSpec a{-1, Projection::q, LoraSide::a, TapKind::branch};
    CHECK(m.tap(fr, b, {3})[0].size() == 16);
    CHECK(m.tap(fr, a, {3})[0].size() == 2);
    CHECK(b.module_id(m.config()) == "L1.q.B");

    // pinning the tapped branch to its own value is a no-op
    TapPins same{{3, m.tap(fr, b, {3})[0]}};
    CHECK(m.forward(toks, false, &b, &same).logits == fr.logits);
    TapPins moved{{3, DenseVector(16, 0.7)}};
    const ForwardResult pinned = m.forward(toks, false, &b, &moved);
    CHECK(m.tap(pinned, b, {3})[0] == DenseVector(16, 0.7));
    CHECK_FALSE(pinned.logits == fr.logits);
}

TEST_CASE("checkpoint round trip") {
    ToyModel m(tiny_config(4));
    randomize_lora(m, 3);
    const fs::path dir = fs::temp_directory_path() / "edit_unit";
    fs::create_directories(dir);
    m.save(dir / "m.ckpt");
    const ToyModel back = ToyModel::load(dir / "m.ckpt");
    CHECK(back.config() == m.config());
    const std::vector<int> toks = random_tokens(m.config(), 9, 1);
    CHECK(back.forward(toks).logits == m.forward(toks).logits);
    CHECK(back.base_checksum() == m.base_checksum());

    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    std::vector<char> bytes{std::istreambuf_iterator<char>(in), {}};
    bytes[bytes.size() / 2] ^= 1;
    std::ofstream(dir / "bad.ckpt", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(ToyModel::load(dir / "bad.ckpt"), Error);
}

TEST_CASE("training examples and tasks") {
    SyntheticTask task;
    task.seq_len = 8;
    task.alphabet = 6;
    const TaskSample s = task.sample(17);
    CHECK(s.prompt.size() == 9);
    CHECK(s.prompt.back() == kSepToken);
    CHECK(std::vector<int>(s.target.rbegin(), s.target.rend()) == std::vector<int>(s.prompt.begin(), s.prompt.end() - 1));
    CHECK(task.sample(17).target == s.target);

    SyntheticTask sum = task;
    sum.kind = TaskKind::modular_sum;
    const TaskSample ms = sum.sample(3);
    int acc = 0;
    for (int i = 0; i < 8; ++i) {
        acc = (acc + ms.prompt[i] - kFirstContentToken) % 6;
        CHECK(ms.target[i] == acc + kFirstContentToken);
    }
    SyntheticTask srt = task;
    srt.kind = TaskKind::sort_small;
    const TaskSample ss = srt.sample(3);
    CHECK(std::is_sorted(ss.target.begin(), ss.target.end()));

    const ModelConfig mc = tiny_config();
    const TrainingExample ex = make_training_example(s, mc, 1, 0.5, 42);
    CHECK(ex.tokens.size() == s.prompt.size() + 8);
    CHECK(ex.targets.size() == 2);
    for (auto [pos, tok] : ex.targets) {
        CHECK(pos >= 13);
        CHECK(ex.tokens[pos] == kMaskToken);
        CHECK(tok == s.target[pos - 9]);
    }
    CHECK_THROWS_AS(parse_task("nope"), Error);
}

TEST_CASE("fine-tuning leaves the base untouched and lowers the loss") {
    ToyModel m(tiny_config(6));
    SyntheticTask task;
    task.seq_len = 8;
    task.alphabet = 6;
    TrainConfig tc;
    tc.pretrain_steps = 30;
    tc.sft_steps = 60;
    tc.batch_size = 4;
    tc.sft_opt.learning_rate = 1e-2;
    pretrain(m, task, tc);
    const std::uint32_t base = m.base_checksum();
    const SftResult r = sft_train(m, task, tc);
    CHECK(m.base_checksum() == base);
    CHECK(r.loss_trace.size() == 60);
    CHECK(r.grad_rms_trace.size() == 60);
    CHECK(r.energy_vectors.size() == 12);
    CHECK(r.bases.size() == 1);
    // windowed means go down on average
    auto mean = [&](int from) {
        double s = 0;
        for (int i = from; i < from + 10; ++i) s += r.loss_trace[i];
        return s / 10;
    };
    CHECK(mean(50) < mean(0));

    // one step from B = 0: U = 0.1 g / (sqrt(0.001) |g| + eps), so every
    // entry is +-3.1623 unless the gradient is tiny
    ToyModel m1(tiny_config(6));
    pretrain(m1, task, tc);
    TrainConfig one = tc;
    one.sft_steps = 1;
    const SftResult r1 = sft_train(m1, task, one);
    const double unit = 0.1 / std::sqrt(0.001);
    for (const EvolutionVector& v : r1.energy_vectors) {
        if (v.module_id != "L1.q.B") continue;
        for (double x : v.u) CHECK(x == doctest::Approx(unit * std::sqrt(2.0)).epsilon(1e-3));
    }
}
