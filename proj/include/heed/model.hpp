#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "heed/density.hpp"
#include "heed/losses.hpp"
#include "heed/mat.hpp"

namespace heed {

struct ToyConfig {
    int n_layers = 4;
    int d_model = 32;
    int n_heads = 2;
    int vocab = 64;
    int grid_h = 6;
    int grid_w = 6;
    int text_len = 8;
    double mixer_ratio = 0.75;
    int feature_dim = 16;
    uint64_t seed = 0;

    int visual_len() const { return grid_h * grid_w; }
    int seq_len() const { return visual_len() + text_len; }
    int head_dim() const { return d_model / n_heads; }

    int n_mixers() const {
        const double m = n_layers * mixer_ratio;
        return static_cast<int>(std::lround(m));
    }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab < 2)
            throw std::invalid_argument("ToyConfig: bad sizes");
        if (d_model % n_heads != 0) throw std::invalid_argument("ToyConfig: d_model not divisible by n_heads");
        if (grid_h < 1 || grid_w < 1 || text_len < 1 || feature_dim < 1)
            throw std::invalid_argument("ToyConfig: bad sequence sizes");
        const double m = n_layers * mixer_ratio;
        if (std::fabs(m - std::lround(m)) > 1e-9)
            throw std::invalid_argument("ToyConfig: n_layers * mixer_ratio not integral");
    }

    // Mixer pattern: layers are split into equal groups with one retained
    // attention layer at the end of each group (3:1 by default).
    std::vector<int> replaced_layers() const {
        const int n_mix = n_mixers();
        const int n_attn = n_layers - n_mix;
        if (n_mix == 0) return {};
        if (n_attn <= 0 || n_layers % n_attn != 0)
            throw std::invalid_argument("ToyConfig: mixer ratio not representable for n_layers");
        const int group = n_layers / n_attn;
        std::vector<int> s;
        for (int l = 0; l < n_layers; ++l)
            if (l % group != group - 1) s.push_back(l);
        return s;
    }

    // Alignment readout layers: the residual stream after each replaced block.
    std::vector<int> alignment_layers() const {
        auto s = replaced_layers();
        for (auto& l : s) ++l;
        return s;
    }
};

enum class BlockKind { Attention, Mixer };

struct Block {
    BlockKind kind = BlockKind::Attention;
    Mat ln1_g;                // 1 x d
    Mat wq, wk, wv, wo;       // d x d
    Mat wg;                   // d x d      (mixer output gate)
    Mat wgamma;               // d x H      (mixer decay projection)
    Mat a_bias;               // 1 x H      (mixer decay bias)
    Mat wconv;                // 4 x d      (depthwise causal conv taps, row j multiplies input at t-j)
    Mat ln2_g;                // 1 x d
    Mat w1, b1, w2, b2;       // MLP: d x 4d, 1 x 4d, 4d x d, 1 x d
};

struct ToyModel {
    ToyConfig cfg;
    Mat embed;     // vocab x d
    Mat pos_row;   // grid_h x d  (factored grid positions)
    Mat pos_col;   // grid_w x d
    Mat pos_text;  // text_len x d
    Mat proj;      // feature_dim x d (frozen patch projector)
    std::vector<Block> blocks;
    Mat lnf_g;  // 1 x d
    Mat head;   // d x vocab

    bool is_hybrid() const {
        for (const auto& b : blocks)
            if (b.kind == BlockKind::Mixer) return true;
        return false;
    }
};

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

// Shared:    teacher-owned modules, frozen during any distillation.
// MixerCore: transferred projections inside mixer blocks (train in stage 2+).
// MixerAux:  newly initialized mixer parameters (train from stage 1).
enum class ParamGroup { Shared, MixerCore, MixerAux };

struct ParamRef {
    std::string name;
    Mat* value = nullptr;
    Mat* grad = nullptr;
    bool decay = true;
    ParamGroup group = ParamGroup::Shared;
};

inline ToyModel make_grads_like(const ToyModel& m) {
    ToyModel g;
    g.cfg = m.cfg;
    g.embed = Mat(m.embed.rows, m.embed.cols);
    g.pos_row = Mat(m.pos_row.rows, m.pos_row.cols);
    g.pos_col = Mat(m.pos_col.rows, m.pos_col.cols);
    g.pos_text = Mat(m.pos_text.rows, m.pos_text.cols);
    g.proj = Mat(m.proj.rows, m.proj.cols);
    g.lnf_g = Mat(m.lnf_g.rows, m.lnf_g.cols);
    g.head = Mat(m.head.rows, m.head.cols);
    g.blocks.resize(m.blocks.size());
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        const Block& b = m.blocks[i];
        Block& gb = g.blocks[i];
        gb.kind = b.kind;
        auto like = [](const Mat& src) { return Mat(src.rows, src.cols); };
        gb.ln1_g = like(b.ln1_g);
        gb.wq = like(b.wq);
        gb.wk = like(b.wk);
        gb.wv = like(b.wv);
        gb.wo = like(b.wo);
        if (b.kind == BlockKind::Mixer) {
            gb.wg = like(b.wg);
            gb.wgamma = like(b.wgamma);
            gb.a_bias = like(b.a_bias);
            gb.wconv = like(b.wconv);
        }
        gb.ln2_g = like(b.ln2_g);
        gb.w1 = like(b.w1);
        gb.b1 = like(b.b1);
        gb.w2 = like(b.w2);
        gb.b2 = like(b.b2);
    }
    return g;
}

inline void zero_grads(ToyModel& g) {
    g.embed.zero();
    g.pos_row.zero();
    g.pos_col.zero();
    g.pos_text.zero();
    g.proj.zero();
    g.lnf_g.zero();
    g.head.zero();
    for (auto& b : g.blocks) {
        b.ln1_g.zero();
        b.wq.zero();
        b.wk.zero();
        b.wv.zero();
        b.wo.zero();
        if (b.kind == BlockKind::Mixer) {
            b.wg.zero();
            b.wgamma.zero();
            b.a_bias.zero();
            b.wconv.zero();
        }
        b.ln2_g.zero();
        b.w1.zero();
        b.b1.zero();
        b.w2.zero();
        b.b2.zero();
    }
}

inline std::vector<ParamRef> param_refs(ToyModel& m, ToyModel* grads = nullptr) {
    std::vector<ParamRef> refs;
    auto add = [&](const std::string& name, Mat& v, Mat* g, bool decay, ParamGroup group) {
        refs.push_back({name, &v, g, decay, group});
    };
    auto gm = [&](Mat ToyModel::* field) -> Mat* { return grads ? &(grads->*field) : nullptr; };
    add("embed", m.embed, gm(&ToyModel::embed), true, ParamGroup::Shared);
    add("pos_row", m.pos_row, gm(&ToyModel::pos_row), true, ParamGroup::Shared);
    add("pos_col", m.pos_col, gm(&ToyModel::pos_col), true, ParamGroup::Shared);
    add("pos_text", m.pos_text, gm(&ToyModel::pos_text), true, ParamGroup::Shared);
    add("proj", m.proj, gm(&ToyModel::proj), true, ParamGroup::Shared);
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        Block& b = m.blocks[i];
        Block* g = grads ? &grads->blocks[i] : nullptr;
        const std::string p = "block" + std::to_string(i) + ".";
        const bool mixer = b.kind == BlockKind::Mixer;
        const ParamGroup core = mixer ? ParamGroup::MixerCore : ParamGroup::Shared;
        auto gf = [&](Mat Block::* field) -> Mat* { return g ? &(g->*field) : nullptr; };
        add(p + "ln1_g", b.ln1_g, gf(&Block::ln1_g), false, ParamGroup::Shared);
        add(p + "wq", b.wq, gf(&Block::wq), true, core);
        add(p + "wk", b.wk, gf(&Block::wk), true, core);
        add(p + "wv", b.wv, gf(&Block::wv), true, core);
        add(p + "wo", b.wo, gf(&Block::wo), true, core);
        if (mixer) {
            add(p + "wg", b.wg, gf(&Block::wg), true, ParamGroup::MixerAux);
            add(p + "wgamma", b.wgamma, gf(&Block::wgamma), true, ParamGroup::MixerAux);
            add(p + "a_bias", b.a_bias, gf(&Block::a_bias), false, ParamGroup::MixerAux);
            add(p + "wconv", b.wconv, gf(&Block::wconv), true, ParamGroup::MixerAux);
        }
        add(p + "ln2_g", b.ln2_g, gf(&Block::ln2_g), false, ParamGroup::Shared);
        add(p + "w1", b.w1, gf(&Block::w1), true, ParamGroup::Shared);
        add(p + "b1", b.b1, gf(&Block::b1), false, ParamGroup::Shared);
        add(p + "w2", b.w2, gf(&Block::w2), true, ParamGroup::Shared);
        add(p + "b2", b.b2, gf(&Block::b2), false, ParamGroup::Shared);
    }
    add("lnf_g", m.lnf_g, gm(&ToyModel::lnf_g), false, ParamGroup::Shared);
    add("head", m.head, gm(&ToyModel::head), true, ParamGroup::Shared);
    return refs;
}

// Hash of all parameters in a fixed group (or all groups), for freeze checks.
inline uint64_t param_hash(ToyModel& m, const std::set<ParamGroup>& groups) {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& r : param_refs(m)) {
        if (!groups.count(r.group)) continue;
        h = fnv1a(r.name.data(), r.name.size(), h);
        h = hash_mat(*r.value, h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

constexpr double kInitSigma = 0.02;
constexpr double kRmsEps = 1e-6;

inline Block make_attention_block(const ToyConfig& cfg, Rng& rng) {
    const int d = cfg.d_model;
    Block b;
    b.kind = BlockKind::Attention;
    b.ln1_g = Mat(1, d);
    b.ln2_g = Mat(1, d);
    for (int i = 0; i < d; ++i) b.ln1_g(0, i) = b.ln2_g(0, i) = 1.0;
    b.wq = Mat(d, d);
    b.wk = Mat(d, d);
    b.wv = Mat(d, d);
    b.wo = Mat(d, d);
    rng.fill_trunc_normal(b.wq, kInitSigma);
    rng.fill_trunc_normal(b.wk, kInitSigma);
    rng.fill_trunc_normal(b.wv, kInitSigma);
    rng.fill_trunc_normal(b.wo, kInitSigma);
    b.w1 = Mat(d, 4 * d);
    b.b1 = Mat(1, 4 * d);
    b.w2 = Mat(4 * d, d);
    b.b2 = Mat(1, d);
    rng.fill_trunc_normal(b.w1, kInitSigma);
    rng.fill_trunc_normal(b.w2, kInitSigma);
    return b;
}

// Untrained teacher: all-attention causal decoder with a frozen-shape patch
// projector in front.
inline ToyModel init_teacher_model(const ToyConfig& cfg) {
    cfg.validate();
    ToyModel m;
    m.cfg = cfg;
    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0x51a7b3c2d4e5f601ULL);
    m.embed = Mat(cfg.vocab, cfg.d_model);
    m.pos_row = Mat(cfg.grid_h, cfg.d_model);
    m.pos_col = Mat(cfg.grid_w, cfg.d_model);
    m.pos_text = Mat(cfg.text_len, cfg.d_model);
    m.proj = Mat(cfg.feature_dim, cfg.d_model);
    rng.fill_trunc_normal(m.embed, kInitSigma);
    rng.fill_trunc_normal(m.pos_row, kInitSigma);
    rng.fill_trunc_normal(m.pos_col, kInitSigma);
    rng.fill_trunc_normal(m.pos_text, kInitSigma);
    rng.fill_trunc_normal(m.proj, kInitSigma);
    for (int l = 0; l < cfg.n_layers; ++l) m.blocks.push_back(make_attention_block(cfg, rng));
    m.lnf_g = Mat(1, cfg.d_model);
    for (int i = 0; i < cfg.d_model; ++i) m.lnf_g(0, i) = 1.0;
    m.head = Mat(cfg.d_model, cfg.vocab);
    rng.fill_trunc_normal(m.head, kInitSigma);
    return m;
}

// Hybrid student: shares every teacher module; replaced layers become mixer
// blocks that inherit the attention projections verbatim and add newly
// initialized gate/decay/conv parameters.
inline ToyModel hybridize(const ToyModel& teacher, const ToyConfig& cfg) {
    cfg.validate();
    ToyModel student = teacher;  // deep copy; non-mixer modules stay bit-identical
    const auto replaced = cfg.replaced_layers();
    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0xc0ffee1234567890ULL);
    const double decay_bias = std::log(0.9 / 0.1);  // sigmoid(decay_bias) ~ 0.9 at init
    for (int l : replaced) {
        Block& b = student.blocks[l];
        b.kind = BlockKind::Mixer;
        const int d = cfg.d_model;
        b.wg = Mat(d, d);
        b.wgamma = Mat(d, cfg.n_heads);
        b.a_bias = Mat(1, cfg.n_heads);
        b.wconv = Mat(4, d);
        rng.fill_trunc_normal(b.wg, kInitSigma);
        rng.fill_trunc_normal(b.wgamma, kInitSigma);
        rng.fill_trunc_normal(b.wconv, kInitSigma);
        for (int h = 0; h < cfg.n_heads; ++h) b.a_bias(0, h) = decay_bias + rng.trunc_normal(kInitSigma);
    }
    return student;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct BlockCache {
    Mat x_in, n1;
    std::vector<double> rms1;
    // attention
    std::vector<Mat> att_probs;  // per head, T x T
    Mat q, k, v, ctx;
    // mixer
    Mat conv_out;             // T x d
    Mat mq, mk, mv;           // T x d
    Mat decay;                // T x H
    std::vector<Mat> states;  // per position, (H * dh) x dh
    Mat gate, o1, y;
    Mat sub_out, x_mid;
    Mat n2;
    std::vector<double> rms2;
    Mat h_pre, h_act;
    Mat x_out;
};

struct FwdCache {
    Mat emb;
    std::vector<BlockCache> blocks;
    Mat nf;
    std::vector<double> rmsf;
    Mat logits;
};

struct ForwardOptions {
    const std::vector<char>* attention_key_mask = nullptr;  // size T, nonzero hides the position
    int bump_block = -1;                                    // residual perturbation injection point
    const Mat* bump = nullptr;                              // added to the stream after bump_block
};

namespace detail {

inline void rmsnorm_fwd(const Mat& x, const Mat& gain, Mat& out, std::vector<double>& inv_rms) {
    const int T = x.rows, d = x.cols;
    out = Mat(T, d);
    inv_rms.resize(T);
    for (int t = 0; t < T; ++t) {
        const double* xt = x.row(t);
        double ms = 0.0;
        for (int i = 0; i < d; ++i) ms += xt[i] * xt[i];
        const double inv = 1.0 / std::sqrt(ms / d + kRmsEps);
        inv_rms[t] = inv;
        double* ot = out.row(t);
        for (int i = 0; i < d; ++i) ot[i] = xt[i] * inv * gain(0, i);
    }
}

inline void rmsnorm_bwd(const Mat& x, const Mat& gain, const std::vector<double>& inv_rms,
                        const Mat& dout, Mat& dx, Mat& dgain) {
    const int T = x.rows, d = x.cols;
    for (int t = 0; t < T; ++t) {
        const double* xt = x.row(t);
        const double* dyt = dout.row(t);
        double* dxt = dx.row(t);
        const double inv = inv_rms[t];
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += dyt[i] * gain(0, i) * xt[i];
        const double k = inv * inv * inv * s / d;
        for (int i = 0; i < d; ++i) {
            dxt[i] += inv * gain(0, i) * dyt[i] - k * xt[i];
            dgain(0, i) += xt[i] * inv * dyt[i];
        }
    }
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

inline void attention_fwd(const ToyConfig& cfg, const Block& b, BlockCache& c,
                          const std::vector<char>* key_mask) {
    const int T = c.n1.rows, d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    matmul(c.n1, b.wq, c.q);
    matmul(c.n1, b.wk, c.k);
    matmul(c.n1, b.wv, c.v);
    c.ctx = Mat(T, d);
    c.att_probs.assign(H, Mat(T, T));
    for (int h = 0; h < H; ++h) {
        Mat& P = c.att_probs[h];
        const int off = h * dh;
        for (int t = 0; t < T; ++t) {
            const double* qt = c.q.row(t) + off;
            double mx = -std::numeric_limits<double>::infinity();
            std::vector<double> sc(t + 1, 0.0);
            bool any = false;
            for (int j = 0; j <= t; ++j) {
                if (key_mask && (*key_mask)[j]) continue;
                any = true;
                sc[j] = dot(qt, c.k.row(j) + off, dh) * scale;
                mx = std::max(mx, sc[j]);
            }
            if (!any) continue;  // empty key support: zero attention output
            double z = 0.0;
            for (int j = 0; j <= t; ++j) {
                if (key_mask && (*key_mask)[j]) continue;
                sc[j] = std::exp(sc[j] - mx);
                z += sc[j];
            }
            double* pt = P.row(t);
            double* ct = c.ctx.row(t) + off;
            for (int j = 0; j <= t; ++j) {
                if (key_mask && (*key_mask)[j]) continue;
                pt[j] = sc[j] / z;
                const double* vj = c.v.row(j) + off;
                for (int i = 0; i < dh; ++i) ct[i] += pt[j] * vj[i];
            }
        }
    }
    matmul(c.ctx, b.wo, c.sub_out);
}

inline void mixer_fwd(const ToyConfig& cfg, const Block& b, BlockCache& c) {
    const int T = c.n1.rows, d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // Depthwise causal convolution over the normed block input.
    c.conv_out = Mat(T, d);
    for (int t = 0; t < T; ++t) {
        double* ct = c.conv_out.row(t);
        for (int j = 0; j < 4 && j <= t; ++j) {
            const double* ut = c.n1.row(t - j);
            const double* kj = b.wconv.row(j);
            for (int i = 0; i < d; ++i) ct[i] += kj[i] * ut[i];
        }
    }
    matmul(c.conv_out, b.wq, c.mq);
    matmul(c.conv_out, b.wk, c.mk);
    matmul(c.conv_out, b.wv, c.mv);

    // Per-head scalar decay from the normed block input.
    c.decay = Mat(T, H);
    for (int t = 0; t < T; ++t) {
        const double* ut = c.n1.row(t);
        for (int h = 0; h < H; ++h) {
            double z = b.a_bias(0, h);
            for (int i = 0; i < d; ++i) z += ut[i] * b.wgamma(i, h);
            c.decay(t, h) = 1.0 / (1.0 + std::exp(-z));
        }
    }

    // Gated outer-product recurrence: S_t = a_t S_{t-1} + v_t k_t^T,
    // o_t = S_t q_t (scaled), then the output gate.
    c.states.assign(T, Mat(H * dh, dh));
    c.o1 = Mat(T, d);
    for (int h = 0; h < H; ++h) {
        const int off = h * dh;
        for (int t = 0; t < T; ++t) {
            Mat& St = c.states[t];
            const double a = c.decay(t, h);
            const double* kt = c.mk.row(t) + off;
            const double* vt = c.mv.row(t) + off;
            if (t > 0) {
                const Mat& Sp = c.states[t - 1];
                for (int i = 0; i < dh; ++i) {
                    const double* sp = Sp.row(off + i);
                    double* st = St.row(off + i);
                    for (int j = 0; j < dh; ++j) st[j] = a * sp[j] + vt[i] * kt[j];
                }
            } else {
                for (int i = 0; i < dh; ++i) {
                    double* st = St.row(off + i);
                    for (int j = 0; j < dh; ++j) st[j] = vt[i] * kt[j];
                }
            }
            const double* qt = c.mq.row(t) + off;
            double* ot = c.o1.row(t) + off;
            for (int i = 0; i < dh; ++i) ot[i] = dot(St.row(off + i), qt, dh) * scale;
        }
    }

    c.gate = Mat(T, d);
    for (int t = 0; t < T; ++t) {
        const double* ut = c.n1.row(t);
        double* gt = c.gate.row(t);
        for (int i = 0; i < d; ++i) {
            double z = 0.0;
            for (int j = 0; j < d; ++j) z += ut[j] * b.wg(j, i);
            gt[i] = 1.0 / (1.0 + std::exp(-z));
        }
    }
    c.y = Mat(T, d);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < d; ++i) c.y(t, i) = c.o1(t, i) * c.gate(t, i);
    matmul(c.y, b.wo, c.sub_out);
}

inline void block_fwd(const ToyConfig& cfg, const Block& b, const Mat& x, BlockCache& c,
                      const std::vector<char>* key_mask) {
    c.x_in = x;
    rmsnorm_fwd(x, b.ln1_g, c.n1, c.rms1);
    if (b.kind == BlockKind::Attention)
        attention_fwd(cfg, b, c, key_mask);
    else
        mixer_fwd(cfg, b, c);
    const int T = x.rows, d = x.cols;
    c.x_mid = Mat(T, d);
    for (size_t i = 0; i < x.a.size(); ++i) c.x_mid.a[i] = x.a[i] + c.sub_out.a[i];
    rmsnorm_fwd(c.x_mid, b.ln2_g, c.n2, c.rms2);
    matmul(c.n2, b.w1, c.h_pre);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < 4 * d; ++i) c.h_pre(t, i) += b.b1(0, i);
    c.h_act = Mat(T, 4 * d);
    for (size_t i = 0; i < c.h_pre.a.size(); ++i) c.h_act.a[i] = silu(c.h_pre.a[i]);
    matmul(c.h_act, b.w2, c.x_out);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < d; ++i) c.x_out(t, i) += b.b2(0, i) + c.x_mid(t, i);
}

}  // namespace detail

// Input embedding: projected patch features plus factored row/column grid
// positions for the visual prefix; token embeddings plus learned positions
// for the text suffix.
inline Mat embed_sequence(const ToyModel& m, const PatchGrid& grid, const std::vector<int>& text_tokens) {
    const ToyConfig& cfg = m.cfg;
    if (grid.height != cfg.grid_h || grid.width != cfg.grid_w || grid.feature_dim != cfg.feature_dim)
        throw std::invalid_argument("forward: grid shape does not match config");
    if (static_cast<int>(text_tokens.size()) > m.pos_text.rows)
        throw std::invalid_argument("forward: sequence exceeds configured maximum");
    const int T = grid.patches() + static_cast<int>(text_tokens.size());
    Mat emb(T, cfg.d_model);
    for (int p = 0; p < grid.patches(); ++p) {
        const double* f = grid.patch(p);
        double* e = emb.row(p);
        for (int j = 0; j < cfg.feature_dim; ++j) {
            const double fj = f[j];
            if (fj == 0.0) continue;
            const double* pr = m.proj.row(j);
            for (int i = 0; i < cfg.d_model; ++i) e[i] += fj * pr[i];
        }
        const double* rr = m.pos_row.row(p / cfg.grid_w);
        const double* cc = m.pos_col.row(p % cfg.grid_w);
        for (int i = 0; i < cfg.d_model; ++i) e[i] += rr[i] + cc[i];
    }
    for (size_t s = 0; s < text_tokens.size(); ++s) {
        const int tok = text_tokens[s];
        if (tok < 0 || tok >= cfg.vocab) throw std::invalid_argument("forward: token id out of range");
        const int t = grid.patches() + static_cast<int>(s);
        const double* er = m.embed.row(tok);
        const double* pr = m.pos_text.row(static_cast<int>(s));
        double* e = emb.row(t);
        for (int i = 0; i < cfg.d_model; ++i) e[i] = er[i] + pr[i];
    }
    return emb;
}

inline void forward(const ToyModel& m, const PatchGrid& grid, const std::vector<int>& text_tokens,
                    FwdCache& cache, const ForwardOptions& opt = {}) {
    cache.emb = embed_sequence(m, grid, text_tokens);
    cache.blocks.assign(m.blocks.size(), BlockCache{});
    const Mat* x = &cache.emb;
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        detail::block_fwd(m.cfg, m.blocks[l], *x, cache.blocks[l], opt.attention_key_mask);
        if (opt.bump != nullptr && static_cast<int>(l) == opt.bump_block) {
            Mat& out = cache.blocks[l].x_out;
            if (!out.same_shape(*opt.bump)) throw std::invalid_argument("forward: bump shape mismatch");
            for (size_t i = 0; i < out.a.size(); ++i) out.a[i] += opt.bump->a[i];
        }
        x = &cache.blocks[l].x_out;
    }
    detail::rmsnorm_fwd(*x, m.lnf_g, cache.nf, cache.rmsf);
    matmul(cache.nf, m.head, cache.logits);
}

// Residual trace: stream snapshots after each replaced block, the replaced
// sublayer outputs, and the logits. The teacher is traced at the same layer
// indices the hybrid pattern designates.
inline ResidualTrace forward_with_residuals(const ToyModel& m, const PatchGrid& grid,
                                            const std::vector<int>& text_tokens, FwdCache& cache,
                                            const ForwardOptions& opt = {}) {
    forward(m, grid, text_tokens, cache, opt);
    ResidualTrace trace;
    trace.layers = m.cfg.alignment_layers();
    for (int l : m.cfg.replaced_layers()) {
        trace.residuals.push_back(cache.blocks[l].x_out);
        trace.block_outputs.push_back(cache.blocks[l].sub_out);
    }
    trace.logits = cache.logits;
    return trace;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

struct BackwardInputs {
    const Mat* d_logits = nullptr;
    // Gradients injected at the residual stream after block b (key = b).
    std::map<int, const Mat*> d_residual;
    // Gradients injected at the sublayer output of block b (key = b).
    std::map<int, const Mat*> d_sub_out;
    // Blocks whose residual-stream adjoint should be captured (post-injection).
    std::set<int> capture_residual;
};

struct BackwardOutputs {
    std::map<int, Mat> residual_adjoints;
};

namespace detail {

inline void attention_bwd(const ToyConfig& cfg, const Block& b, Block& gb, const BlockCache& c,
                          const Mat& d_sub, Mat& dn1) {
    const int T = c.n1.rows, d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat dctx(T, d);
    matmul_tn_acc(c.ctx, d_sub, gb.wo);
    matmul_nt(d_sub, b.wo, dctx);
    Mat dq(T, d), dk(T, d), dv(T, d);
    for (int h = 0; h < H; ++h) {
        const int off = h * dh;
        const Mat& P = c.att_probs[h];
        for (int t = 0; t < T; ++t) {
            const double* dct = dctx.row(t) + off;
            const double* pt = P.row(t);
            // dP and softmax backward (rows with empty support stay zero).
            double dpdot = 0.0;
            std::vector<double> dp(t + 1);
            for (int j = 0; j <= t; ++j) {
                dp[j] = dot(dct, c.v.row(j) + off, dh);
                dpdot += dp[j] * pt[j];
            }
            for (int j = 0; j <= t; ++j) {
                const double ds = pt[j] * (dp[j] - dpdot);
                if (pt[j] != 0.0) {
                    double* dvj = dv.row(j) + off;
                    for (int i = 0; i < dh; ++i) dvj[i] += pt[j] * dct[i];
                }
                if (ds != 0.0) {
                    const double* kj = c.k.row(j) + off;
                    const double* qt = c.q.row(t) + off;
                    double* dqt = dq.row(t) + off;
                    double* dkj = dk.row(j) + off;
                    for (int i = 0; i < dh; ++i) {
                        dqt[i] += ds * kj[i] * scale;
                        dkj[i] += ds * qt[i] * scale;
                    }
                }
            }
        }
    }
    matmul_tn_acc(c.n1, dq, gb.wq);
    matmul_tn_acc(c.n1, dk, gb.wk);
    matmul_tn_acc(c.n1, dv, gb.wv);
    Mat tmp;
    matmul_nt(dq, b.wq, tmp);
    for (size_t i = 0; i < dn1.a.size(); ++i) dn1.a[i] += tmp.a[i];
    matmul_nt(dk, b.wk, tmp);
    for (size_t i = 0; i < dn1.a.size(); ++i) dn1.a[i] += tmp.a[i];
    matmul_nt(dv, b.wv, tmp);
    for (size_t i = 0; i < dn1.a.size(); ++i) dn1.a[i] += tmp.a[i];
}

inline void mixer_bwd(const ToyConfig& cfg, const Block& b, Block& gb, const BlockCache& c,
                      const Mat& d_sub, Mat& dn1) {
    const int T = c.n1.rows, d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat dy(T, d);
    matmul_tn_acc(c.y, d_sub, gb.wo);
    matmul_nt(d_sub, b.wo, dy);

    Mat do1(T, d), dgate_z(T, d);
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < d; ++i) {
            const double g = c.gate(t, i);
            do1(t, i) = dy(t, i) * g;
            dgate_z(t, i) = dy(t, i) * c.o1(t, i) * g * (1.0 - g);
        }
    }
    matmul_tn_acc(c.n1, dgate_z, gb.wg);
    Mat tmp;
    matmul_nt(dgate_z, b.wg, tmp);
    for (size_t i = 0; i < dn1.a.size(); ++i) dn1.a[i] += tmp.a[i];

    Mat dmq(T, d), dmk(T, d), dmv(T, d);
    Mat ddecay(T, H);
    Mat DS(dh, dh);
    for (int h = 0; h < H; ++h) {
        const int off = h * dh;
        DS.zero();
        for (int t = T - 1; t >= 0; --t) {
            const double* dot_t = do1.row(t) + off;
            const double* qt = c.mq.row(t) + off;
            const Mat& St = c.states[t];
            // o_t = scale * S_t q_t
            double* dqt = dmq.row(t) + off;
            for (int j = 0; j < dh; ++j) {
                double s = 0.0;
                for (int i = 0; i < dh; ++i) s += St(off + i, j) * dot_t[i];
                dqt[j] += scale * s;
            }
            for (int i = 0; i < dh; ++i) {
                double* dsrow = DS.row(i);
                const double di = scale * dot_t[i];
                for (int j = 0; j < dh; ++j) dsrow[j] += di * qt[j];
            }
            // S_t = a_t S_{t-1} + v_t k_t^T
            const double a = c.decay(t, h);
            const double* kt = c.mk.row(t) + off;
            const double* vt = c.mv.row(t) + off;
            double da = 0.0;
            if (t > 0) {
                const Mat& Sp = c.states[t - 1];
                for (int i = 0; i < dh; ++i) da += dot(DS.row(i), Sp.row(off + i), dh);
            }
            ddecay(t, h) = da;
            double* dkt = dmk.row(t) + off;
            double* dvt = dmv.row(t) + off;
            for (int i = 0; i < dh; ++i) {
                const double* dsrow = DS.row(i);
                for (int j = 0; j < dh; ++j) {
                    dvt[i] += dsrow[j] * kt[j];
                    dkt[j] += dsrow[j] * vt[i];
                }
            }
            for (size_t i = 0; i < DS.a.size(); ++i) DS.a[i] *= a;
        }
    }

    // decay backward: a = sigmoid(u . wgamma_h + A_h)
    for (int t = 0; t < T; ++t) {
        const double* ut = c.n1.row(t);
        double* dn1t = dn1.row(t);
        for (int h = 0; h < H; ++h) {
            const double a = c.decay(t, h);
            const double dz = ddecay(t, h) * a * (1.0 - a);
            if (dz == 0.0) continue;
            gb.a_bias(0, h) += dz;
            for (int i = 0; i < d; ++i) {
                gb.wgamma(i, h) += dz * ut[i];
                dn1t[i] += dz * b.wgamma(i, h);
            }
        }
    }

    // projections backward into the conv output
    Mat dconv(T, d);
    matmul_tn_acc(c.conv_out, dmq, gb.wq);
    matmul_tn_acc(c.conv_out, dmk, gb.wk);
    matmul_tn_acc(c.conv_out, dmv, gb.wv);
    matmul_nt(dmq, b.wq, tmp);
    for (size_t i = 0; i < dconv.a.size(); ++i) dconv.a[i] += tmp.a[i];
    matmul_nt(dmk, b.wk, tmp);
    for (size_t i = 0; i < dconv.a.size(); ++i) dconv.a[i] += tmp.a[i];
    matmul_nt(dmv, b.wv, tmp);
    for (size_t i = 0; i < dconv.a.size(); ++i) dconv.a[i] += tmp.a[i];

    // conv backward
    for (int t = 0; t < T; ++t) {
        const double* dct = dconv.row(t);
        for (int j = 0; j < 4 && j <= t; ++j) {
            const double* ut = c.n1.row(t - j);
            const double* kj = b.wconv.row(j);
            double* gkj = gb.wconv.row(j);
            double* dn1t = dn1.row(t - j);
            for (int i = 0; i < d; ++i) {
                gkj[i] += dct[i] * ut[i];
                dn1t[i] += dct[i] * kj[i];
            }
        }
    }
}

inline void block_bwd(const ToyConfig& cfg, const Block& b, Block& gb, const BlockCache& c,
                      const Mat& dx_out, Mat& dx_in) {
    const int T = c.x_in.rows, d = cfg.d_model;
    // MLP sublayer
    Mat dh_act(T, 4 * d);
    matmul_nt(dx_out, b.w2, dh_act);
    matmul_tn_acc(c.h_act, dx_out, gb.w2);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < d; ++i) gb.b2(0, i) += dx_out(t, i);
    Mat dh_pre(T, 4 * d);
    for (size_t i = 0; i < dh_pre.a.size(); ++i) dh_pre.a[i] = dh_act.a[i] * silu_grad(c.h_pre.a[i]);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < 4 * d; ++i) gb.b1(0, i) += dh_pre(t, i);
    Mat dn2(T, d);
    matmul_nt(dh_pre, b.w1, dn2);
    matmul_tn_acc(c.n2, dh_pre, gb.w1);
    Mat dx_mid(T, d);
    for (size_t i = 0; i < dx_mid.a.size(); ++i) dx_mid.a[i] = dx_out.a[i];  // skip connection
    rmsnorm_bwd(c.x_mid, b.ln2_g, c.rms2, dn2, dx_mid, gb.ln2_g);

    // sublayer (attention or mixer); dx_mid is also the sublayer-output adjoint
    Mat dn1(T, d);
    if (b.kind == BlockKind::Attention)
        attention_bwd(cfg, b, gb, c, dx_mid, dn1);
    else
        mixer_bwd(cfg, b, gb, c, dx_mid, dn1);

    dx_in = dx_mid;  // skip connection
    rmsnorm_bwd(c.x_in, b.ln1_g, c.rms1, dn1, dx_in, gb.ln1_g);
}

}  // namespace detail

// Reverse pass. Gradients can enter at the logits, at residual-stream taps,
// and at sublayer outputs; parameter gradients accumulate into `grads`.
// Residual adjoints requested in `inputs.capture_residual` are written to the
// returned map (these are the teacher-sensitivity gradients).
inline BackwardOutputs backward(const ToyModel& m, const FwdCache& cache, const BackwardInputs& inputs,
                                ToyModel& grads, const PatchGrid& grid,
                                const std::vector<int>& text_tokens) {
    const ToyConfig& cfg = m.cfg;
    const int T = cache.emb.rows;
    const int d = cfg.d_model;
    BackwardOutputs out;

    Mat dx(T, d);
    if (inputs.d_logits != nullptr) {
        matmul_tn_acc(cache.nf, *inputs.d_logits, grads.head);
        Mat dnf;
        matmul_nt(*inputs.d_logits, m.head, dnf);
        const Mat& xf = cache.blocks.back().x_out;
        detail::rmsnorm_bwd(xf, m.lnf_g, cache.rmsf, dnf, dx, grads.lnf_g);
    }

    for (int l = static_cast<int>(m.blocks.size()) - 1; l >= 0; --l) {
        if (auto it = inputs.d_residual.find(l); it != inputs.d_residual.end()) {
            const Mat& g = *it->second;
            for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] += g.a[i];
        }
        if (inputs.capture_residual.count(l)) out.residual_adjoints[l] = dx;
        Mat dx_in(T, d);
        detail::block_bwd(cfg, m.blocks[l], grads.blocks[l], cache.blocks[l], dx, dx_in);
        if (auto it = inputs.d_sub_out.find(l); it != inputs.d_sub_out.end()) {
            // Gradient injected directly at the sublayer output: it reaches
            // x_in only through the sublayer path, not the skip connection.
            Mat dn1(T, d);
            Mat extra_in(T, d);
            if (m.blocks[l].kind == BlockKind::Attention)
                detail::attention_bwd(cfg, m.blocks[l], grads.blocks[l], cache.blocks[l], *it->second, dn1);
            else
                detail::mixer_bwd(cfg, m.blocks[l], grads.blocks[l], cache.blocks[l], *it->second, dn1);
            detail::rmsnorm_bwd(cache.blocks[l].x_in, m.blocks[l].ln1_g, cache.blocks[l].rms1, dn1,
                                extra_in, grads.blocks[l].ln1_g);
            for (size_t i = 0; i < dx_in.a.size(); ++i) dx_in.a[i] += extra_in.a[i];
        }
        dx = std::move(dx_in);
    }

    // Embedding backward
    const int nv = grid.patches();
    for (int p = 0; p < nv; ++p) {
        const double* f = grid.patch(p);
        const double* dxt = dx.row(p);
        for (int j = 0; j < cfg.feature_dim; ++j) {
            if (f[j] == 0.0) continue;
            double* gp = grads.proj.row(j);
            for (int i = 0; i < d; ++i) gp[i] += f[j] * dxt[i];
        }
    }
    for (int p = 0; p < nv; ++p) {
        double* gr = grads.pos_row.row(p / cfg.grid_w);
        double* gc = grads.pos_col.row(p % cfg.grid_w);
        const double* dxt = dx.row(p);
        for (int i = 0; i < d; ++i) {
            gr[i] += dxt[i];
            gc[i] += dxt[i];
        }
    }
    for (size_t s = 0; s < text_tokens.size(); ++s) {
        const int t = nv + static_cast<int>(s);
        double* ge = grads.embed.row(text_tokens[s]);
        double* gp = grads.pos_text.row(static_cast<int>(s));
        const double* dxt = dx.row(t);
        for (int i = 0; i < d; ++i) {
            ge[i] += dxt[i];
            gp[i] += dxt[i];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: flat container of named arrays plus a config echo.
// ---------------------------------------------------------------------------

namespace ckptfmt {
constexpr char kMagic[8] = {'H', 'E', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
}  // namespace ckptfmt

inline void save_checkpoint(ToyModel& m, const std::string& path, const std::string& meta_json) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    auto put = [&](const void* p, size_t n) { f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); };
    auto put_u32 = [&](uint32_t v) { put(&v, 4); };
    put(ckptfmt::kMagic, 8);
    put_u32(ckptfmt::kVersion);
    put_u32(static_cast<uint32_t>(meta_json.size()));
    put(meta_json.data(), meta_json.size());

    // Config echo (binary, fixed order).
    const ToyConfig& c = m.cfg;
    const int32_t ints[9] = {c.n_layers, c.d_model, c.n_heads, c.vocab, c.grid_h, c.grid_w,
                             c.text_len, c.feature_dim, 0};
    put(ints, sizeof ints);
    const double ratio = c.mixer_ratio;
    put(&ratio, 8);
    const uint64_t seed = c.seed;
    put(&seed, 8);
    uint32_t kinds = 0;
    for (size_t i = 0; i < m.blocks.size(); ++i)
        if (m.blocks[i].kind == BlockKind::Mixer) kinds |= (1u << i);
    put_u32(kinds);

    auto refs = param_refs(m);
    put_u32(static_cast<uint32_t>(refs.size()));
    for (const auto& r : refs) {
        put_u32(static_cast<uint32_t>(r.name.size()));
        put(r.name.data(), r.name.size());
        put_u32(static_cast<uint32_t>(r.value->rows));
        put_u32(static_cast<uint32_t>(r.value->cols));
        put(r.value->a.data(), r.value->a.size() * sizeof(double));
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline ToyModel load_checkpoint(const std::string& path, std::string* meta_json = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    auto get = [&](void* p, size_t n) {
        f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!f) throw std::runtime_error("load_checkpoint: truncated file " + path);
    };
    auto get_u32 = [&]() {
        uint32_t v;
        get(&v, 4);
        return v;
    };
    char magic[8];
    get(magic, 8);
    if (std::memcmp(magic, ckptfmt::kMagic, 8) != 0) throw std::runtime_error("load_checkpoint: bad magic");
    if (get_u32() != ckptfmt::kVersion) throw std::runtime_error("load_checkpoint: unsupported version");
    const uint32_t meta_len = get_u32();
    std::string meta(meta_len, '\0');
    get(meta.data(), meta_len);
    if (meta_json) *meta_json = meta;

    int32_t ints[9];
    get(ints, sizeof ints);
    ToyConfig cfg;
    cfg.n_layers = ints[0];
    cfg.d_model = ints[1];
    cfg.n_heads = ints[2];
    cfg.vocab = ints[3];
    cfg.grid_h = ints[4];
    cfg.grid_w = ints[5];
    cfg.text_len = ints[6];
    cfg.feature_dim = ints[7];
    get(&cfg.mixer_ratio, 8);
    get(&cfg.seed, 8);
    const uint32_t kinds = get_u32();

    ToyModel m = init_teacher_model(cfg);
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        if (kinds & (1u << i)) {
            Block& b = m.blocks[i];
            b.kind = BlockKind::Mixer;
            b.wg = Mat(cfg.d_model, cfg.d_model);
            b.wgamma = Mat(cfg.d_model, cfg.n_heads);
            b.a_bias = Mat(1, cfg.n_heads);
            b.wconv = Mat(4, cfg.d_model);
        }
    }
    const uint32_t n_params = get_u32();
    auto refs = param_refs(m);
    if (n_params != refs.size()) throw std::runtime_error("load_checkpoint: parameter count mismatch");
    for (auto& r : refs) {
        const uint32_t name_len = get_u32();
        std::string name(name_len, '\0');
        get(name.data(), name_len);
        if (name != r.name) throw std::runtime_error("load_checkpoint: parameter order mismatch at " + name);
        const uint32_t rows = get_u32(), cols = get_u32();
        if (rows != static_cast<uint32_t>(r.value->rows) || cols != static_cast<uint32_t>(r.value->cols))
            throw std::runtime_error("load_checkpoint: shape mismatch at " + name);
        get(r.value->a.data(), r.value->a.size() * sizeof(double));
    }
    return m;
}

}  // namespace heed
