import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from causal_ehr_lab.cohort import KIND_ENC, MASK, encode_patient
from causal_ehr_lab.errors import ValidationError
from causal_ehr_lab.model.config import ModelConfig, desk_preset, load_config, paper_preset
from causal_ehr_lab.model.io import dumps_params, loads_params
from causal_ehr_lab.model.losses import (
    IGNORE,
    kl_standard_normal,
    loss_mem_static,
    loss_mem_temp,
    loss_parts,
    loss_supervised,
    loss_total,
    mode_loss,
)
from causal_ehr_lab.model.masking import ReplacementPool, mask_batch, mask_encounters
from causal_ehr_lab.model.net import PROB_FLOOR, TBEHRT, ForwardOutput
from causal_ehr_lab.model.train import collate, embed_sequence, encode_cohort, batch_arrays, to_tensors
from causal_ehr_lab.synth import generate, persistent_config

from .conftest import make_patient


def small_cfg(**kw):
    base = dict(hidden=8, intermediate=16, n_layers=1, heads=2, hidden_dropout=0.0, attention_dropout=0.0,
                max_seq_len=16, vae_latent_dim=4, max_age=120, n_years=200)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def small_cohort():
    cohort, _ = generate(persistent_config(beta=5, n_patients=12, seed=1))
    return cohort


def batch_for(cohort, cfg, idx=None):
    ec = encode_cohort(cohort, cfg.max_seq_len)
    idx = np.arange(len(ec)) if idx is None else np.asarray(idx)
    return to_tensors(batch_arrays(ec, idx))


def net_for(cohort, cfg, seed=0):
    torch.manual_seed(seed)
    return TBEHRT.for_vocab(cfg, cohort.vocabulary).eval()


# -- config -----------------------------------------------------------------

def test_config_defaults_and_validation(tmp_path):
    cfg = paper_preset()
    assert (cfg.hidden, cfg.intermediate, cfg.n_layers, cfg.max_seq_len) == (150, 108, 4, 200)
    assert (cfg.hidden_dropout, cfg.attention_dropout, cfg.delta, cfg.decay_rate) == (0.3, 0.4, 0.1, 0.95)
    assert cfg.epochs_pretrain == 5 and cfg.mem_budget == pytest.approx(0.15)
    with pytest.raises(ValidationError):
        ModelConfig(hidden=10, heads=3)
    with pytest.raises(ValidationError):
        ModelConfig(hidden_dropout=1.0)
    with pytest.raises(ValidationError):
        ModelConfig(mem_mask_fraction=0.9, mem_replace_fraction=0.2)
    path = tmp_path / "m.json"
    path.write_text('{"hidden": 16, "heads": 2}')
    loaded = load_config(path, "desk")
    assert loaded.hidden == 16 and loaded.n_layers == desk_preset().n_layers


# -- embedding and encoder --------------------------------------------------

def test_embedding_shape_paper_defaults(small_cohort):
    cfg = paper_preset()
    net = net_for(small_cohort, cfg)
    enc = encode_patient(small_cohort.patients[0], small_cohort.vocabulary, cfg.max_seq_len)
    assert tuple(embed_sequence(enc, net).shape) == (len(enc), 150)


def test_zero_tables_give_zero_embedding(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg)
    for emb in [net.code_emb, net.age_emb, net.year_emb, net.pos_emb, *net.static_emb.values()]:
        torch.nn.init.zeros_(emb.weight)
    enc = encode_patient(small_cohort.patients[0], small_cohort.vocabulary, cfg.max_seq_len)
    assert torch.count_nonzero(embed_sequence(enc, net)) == 0


def test_one_hot_tables_hand_computed(tiny_vocab):
    cfg = small_cfg(max_seq_len=8)
    net = TBEHRT.for_vocab(cfg, tiny_vocab)
    tables = [net.code_emb, net.age_emb, net.year_emb, net.pos_emb]
    with torch.no_grad():
        for k, emb in enumerate(tables):
            emb.weight.zero_()
            emb.weight[:, k] = torch.arange(emb.weight.shape[0], dtype=emb.weight.dtype)
        for k, emb in enumerate(net.static_emb.values()):
            emb.weight.zero_()
            emb.weight[:, 4 + k] = torch.arange(emb.weight.shape[0], dtype=emb.weight.dtype) + 1
    p = make_patient("h", ["DX_B", "RX_A"], tiny_vocab, sex=1, region=2, smoking=0, age0=50, year0=2000)
    enc = encode_patient(p, tiny_vocab, 8)
    out = embed_sequence(enc, net)
    dx_b, rx_a = tiny_vocab.id_of("DX_B"), tiny_vocab.id_of("RX_A")
    # slot 1 (DX_B at age 50, year 2000 -> index 101, position 1)
    assert out[1, :4].tolist() == [dx_b, 50, 101, 1]
    assert out[2, :4].tolist() == [rx_a, 51, 102, 2]
    # CLS: code id 3, baseline timestamp, position 0
    assert out[0, :4].tolist() == [3, 50, 101, 0]
    # static slots: only their own table; value + 1 by construction
    assert out[3].tolist() == [0, 0, 0, 0, 2, 0, 0, 0]
    assert out[4].tolist() == [0, 0, 0, 0, 0, 3, 0, 0]
    assert out[5].tolist() == [0, 0, 0, 0, 0, 0, 1, 0]


def test_embedding_index_range_error(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg)
    b = batch_for(small_cohort, cfg, [0])
    b["codes"][0, 1] = net.vocab_size + 3
    with pytest.raises(IndexError):
        net(b)


def test_joint_permutation_leaves_cls_unchanged(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg).double()
    b = batch_for(small_cohort, cfg, [0])
    perm = torch.arange(b["codes"].shape[1])
    perm[1], perm[2] = 2, 1
    swapped = {k: (v[:, perm] if v.ndim == 2 else v) for k, v in b.items()}
    a = net.encode(net.embed(*(b[k] for k in ("codes", "ages", "years", "positions", "kinds", "statics"))),
                   b["kinds"] != 0)[0]
    c = net.encode(net.embed(*(swapped[k] for k in ("codes", "ages", "years", "positions", "kinds", "statics"))),
                   swapped["kinds"] != 0)[0]
    assert torch.allclose(a[:, 0], c[:, 0], atol=1e-12)


def test_dropout_off_deterministic_and_attention_normalised(small_cohort):
    cfg = small_cfg(hidden_dropout=0.3, attention_dropout=0.4)
    net = net_for(small_cohort, cfg)
    b = batch_for(small_cohort, cfg)
    o1 = net(b, with_mem=False, return_attn=True)
    o2 = net(b, with_mem=False, return_attn=True)
    assert torch.equal(o1.g_logit, o2.g_logit) and torch.equal(o1.q1_logit, o2.q1_logit)
    for attn in o1.attentions:
        assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-6)
        assert torch.all(attn[..., (b["kinds"] == 0)[0]] == 0) if (b["kinds"][0] == 0).any() else True


def test_batch_composition_invariance(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg)
    full = net(batch_for(small_cohort, cfg), with_mem=False)
    for i in (0, 5, 11):
        single = net(batch_for(small_cohort, cfg, [i]), with_mem=False)
        assert torch.allclose(single.g_logit, full.g_logit[i:i + 1], atol=1e-6)
        assert torch.allclose(single.q0_logit, full.q0_logit[i:i + 1], atol=1e-6)


# -- heads ------------------------------------------------------------------

def test_zero_head_weights_give_half(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg)
    for mod in (net.propensity, net.outcome0, net.outcome1):
        for p in mod.parameters():
            torch.nn.init.zeros_(p)
    out = net(batch_for(small_cohort, cfg), with_mem=False)
    for v in (out.g, out.q0, out.q1):
        assert torch.all(v == 0.5)


def test_branch_isolation(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg)
    b = batch_for(small_cohort, cfg)
    before = net(b, with_mem=False)
    with torch.no_grad():
        for p in net.outcome1.parameters():
            p.add_(torch.randn_like(p))
    after = net(b, with_mem=False)
    assert torch.equal(before.q0_logit, after.q0_logit)
    assert not torch.equal(before.q1_logit, after.q1_logit)


def test_propensity_head_manual_arithmetic(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg)
    latents = torch.randn(3, 5, cfg.hidden)
    g, _, _ = net.heads(latents)
    pooled = torch.tanh(latents[:, 0] @ net.pooler.weight.T + net.pooler.bias)
    lin1, lin2 = net.propensity[0], net.propensity[2]
    hidden = F.elu(pooled @ lin1.weight.T + lin1.bias)
    manual = hidden @ lin2.weight.T + lin2.bias
    assert torch.allclose(g, manual.squeeze(-1), atol=1e-6)


def test_probabilities_clipped(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg)
    with torch.no_grad():
        net.propensity[2].bias.fill_(1e4)
        net.outcome0[4].bias.fill_(-1e4)
    out = net(batch_for(small_cohort, cfg), with_mem=False)
    assert torch.all(out.g <= 1 - PROB_FLOOR) and torch.all(out.q0 >= PROB_FLOOR)
    assert torch.all(torch.isfinite(out.g_logit))


# -- losses -----------------------------------------------------------------

def _out(q_t, g):
    lg = torch.logit(torch.tensor([g], dtype=torch.float64))
    lq = torch.logit(torch.tensor([q_t], dtype=torch.float64))
    return ForwardOutput(g_logit=lg, q0_logit=lq, q1_logit=lq)


def test_supervised_loss_examples():
    t1, y1 = torch.tensor([1]), torch.tensor([1])
    assert float(loss_supervised(_out(0.5, 0.5), t1, y1)) == pytest.approx(2 * math.log(2))
    v = float(loss_supervised(_out(0.8, 0.3), torch.tensor([0]), torch.tensor([1])))
    assert v == pytest.approx(-math.log(0.8) - math.log(0.7), abs=1e-12)
    assert round(v, 4) == 0.5798
    v = float(loss_supervised(_out(1 - PROB_FLOOR, 1 - PROB_FLOOR), t1, y1))
    assert v == pytest.approx(-2 * math.log(1 - PROB_FLOOR), rel=1e-6)


def test_mem_temp_examples():
    assert float(loss_mem_temp(torch.zeros(1, 3, 4), torch.full((1, 3), IGNORE))) == 0.0
    labels = torch.tensor([[2, IGNORE]])
    assert float(loss_mem_temp(torch.zeros(1, 2, 4), labels)) == pytest.approx(math.log(4))
    probs = torch.tensor([[[0.5, 0.25, 0.25, 0.0 + 1e-300], [0.25, 0.25, 0.25, 0.25]]], dtype=torch.float64)
    v = float(loss_mem_temp(torch.log(probs), torch.tensor([[0, 1]])))
    assert v == pytest.approx((math.log(2) + math.log(4)) / 2)
    assert round(v, 4) == 1.0397


def test_kl_and_static_loss_examples():
    assert float(kl_standard_normal(torch.zeros(1, 3), torch.zeros(1, 3))) == 0.0
    assert float(kl_standard_normal(torch.tensor([[1.0, 0.0]]), torch.zeros(1, 2))) == pytest.approx(0.5)
    logits = {"sex": torch.tensor([[-50.0, 50.0]])}
    v = float(loss_mem_static(torch.zeros(1, 2), torch.zeros(1, 2), logits, {"sex": torch.tensor([1])}))
    assert v < 1e-12


def test_loss_total_examples():
    assert loss_total(1.0, 2.0, 3.0, 0.1) == pytest.approx(1.5)
    assert loss_total(1.25, 2.0, 3.0, 0.0) == 1.25
    assert ModelConfig().delta == 0.1


def test_mode_lattice_equalities(small_cohort):
    cfg = small_cfg()
    net = net_for(small_cohort, cfg).train()
    ec = encode_cohort(small_cohort, cfg.max_seq_len)
    b = batch_arrays(ec, np.arange(len(ec)))
    codes, statics, labels, slabels = mask_batch(b["codes"], b["kinds"], b["statics"],
                                                 ReplacementPool(small_cohort.vocabulary), cfg,
                                                 ec.static_cards, np.random.default_rng(0))
    b.update(codes=codes, statics=statics, mem_labels=labels, static_labels=slabels)
    tb = to_tensors(b)
    torch.manual_seed(3)
    parts = loss_parts(net(tb), tb)
    full0 = mode_loss(parts, "t-behrt", 0.0)
    assert torch.equal(mode_loss(parts, "dragonnet", 0.1), full0)
    no_prop = dict(parts, propensity=torch.zeros_like(parts["propensity"]))
    assert torch.equal(mode_loss(parts, "tarnet", 0.1), mode_loss(no_prop, "t-behrt", 0.0))
    assert torch.equal(mode_loss(parts, "tarnet-mem", 0.1), mode_loss(no_prop, "t-behrt", 0.1))


# -- masking ----------------------------------------------------------------

def test_masking_budget_zero_and_one(small_cohort):
    vocab = small_cohort.vocabulary
    enc = encode_patient(small_cohort.patients[0], vocab, 64)
    rng = np.random.default_rng(0)
    none = desk_preset(mem_mask_fraction=0.0, mem_replace_fraction=0.0, mem_keep_fraction=0.0, static_mask_prob=0.0)
    pert, labels, slabels = mask_encounters(enc, vocab, none, rng)
    assert np.array_equal(pert.codes, enc.codes) and np.all(labels == IGNORE)
    assert all(v == IGNORE for v in slabels.values())
    full = desk_preset(mem_mask_fraction=1.0, mem_replace_fraction=0.0, mem_keep_fraction=0.0)
    pert, labels, _ = mask_encounters(enc, vocab, full, rng)
    temporal = enc.kinds == KIND_ENC
    assert np.all(pert.codes[temporal] == MASK)
    assert np.array_equal(labels[temporal], enc.codes[temporal])
    assert np.all(labels[~temporal] == IGNORE)


def test_replacement_same_category_and_unprotected(small_cohort):
    vocab = small_cohort.vocabulary
    pool = ReplacementPool(vocab)
    rng = np.random.default_rng(1)
    originals = rng.choice(np.array(list(vocab.protected) + vocab.ids_in_category("diagnosis")), size=20_000)
    drawn = pool.draw(originals, rng)
    cats = vocab.category_codes
    assert np.array_equal(cats[drawn], cats[originals])
    assert not np.isin(drawn, list(vocab.protected)).any()


def test_withheld_static_never_masked(small_cohort):
    cfg = desk_preset(static_mask_prob=1.0)
    ec = encode_cohort(small_cohort, 64, withheld_statics=("sex",))
    b = batch_arrays(ec, np.arange(len(ec)))
    _, statics, _, slabels = mask_batch(b["codes"], b["kinds"], b["statics"], ReplacementPool(small_cohort.vocabulary),
                                        cfg, ec.static_cards, np.random.default_rng(0), withheld=ec.withheld_statics)
    assert np.all(slabels["sex"] == IGNORE)
    assert np.all(slabels["region"] != IGNORE)


# -- io ---------------------------------------------------------------------

def test_params_round_trip(small_cohort):
    net = net_for(small_cohort, small_cfg())
    blob = dumps_params({"fold0": net.state_dict()}, {"mode": "t-behrt"})
    assert blob[:4] == b"CELP"
    states, meta = loads_params(blob)
    assert meta == {"mode": "t-behrt"}
    for k, v in net.state_dict().items():
        assert torch.equal(states["fold0"][k], v.float())
    with pytest.raises(ValidationError):
        loads_params(blob[:-4])
    with pytest.raises(ValidationError):
        loads_params(b"XXXX" + blob[4:])


def test_collate_pads_with_zero_kind(small_cohort):
    seqs = [encode_patient(p, small_cohort.vocabulary, 64) for p in small_cohort.patients[:3]]
    b = collate(seqs)
    L = max(len(s) for s in seqs)
    assert b["codes"].shape == (3, L)
    for i, s in enumerate(seqs):
        assert np.all(b["kinds"][i, len(s):] == 0)
        assert b["lengths"][i] == len(s)
