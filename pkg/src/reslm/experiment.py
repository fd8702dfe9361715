"""End-to-end experiment pipeline over a working directory.

Every stage reads its inputs from the directory, writes its outputs back and
appends a line to ``manifest.txt``. Stages can be run one by one (the CLI
does this) or chained with :func:`run_pipeline`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import corpus as C
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .fusion import (
    ModelBundle,
    benchmark,
    decode_corpus,
    format_transcripts,
    parse_speed_report,
    read_transcripts,
    speed_report,
)
from .metrics import corpus_wer, format_results_table, parse_results_table
from .models import train_asr, train_lm
from .parallel import single_threaded
from .residual import format_epoch_line, train_residual

# decodable methods: name -> (fusion variant, residual checkpoint)
METHODS = {
    "none": ("none", None),
    "shallow": ("shallow", None),
    "density_ratio": ("density_ratio", None),
    "ilme": ("ilme", None),
    "residual": ("residual", "residual.ckpt"),
    "residual_elementwise_mse": ("residual", "residual_elementwise_mse.ckpt"),
}
TABLE_ORDER = tuple(METHODS)
BENCH_METHODS = ("shallow", "ilme", "residual")
EPOCH_DIR = "epochs"


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing artifact {path} (produced by '{producer}')")
        self.path = path
        self.producer = producer


Log = Callable[[str], None]


def _quiet(_msg: str) -> None:
    pass


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, name: str) -> Path:
        return self.root / name

    def need(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(p, producer)
        return p

    def record(self, command: str, cfg: ExperimentConfig, outputs: Sequence[str]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        line = f"{command}\tconfig_sha256 {cfg.hash()}\tversion {__version__}\toutputs {','.join(outputs)}\n"
        with open(self.path("manifest.txt"), "a", encoding="utf-8") as f:
            f.write(line)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def build_data(cfg: ExperimentConfig) -> Dict[str, object]:
    """All corpora, grammars and the codebook, in memory."""
    K = cfg.vocab_size
    mk = lambda seed: C.build_grammar(seed, K, cfg.concentration, cfg.eos_prob, popularity=cfg.popularity)
    g_src = mk(cfg.source_grammar_seed)
    g_tgt = mk(cfg.target_seed)
    sample = lambda g, n, stage: C.sample_corpus(g, n, cfg.len_min, cfg.len_max, cfg.derived_seed(stage))
    return {
        "grammar_source": g_src,
        "grammar_target": g_tgt,
        "codebook": C.build_codebook(K, cfg.feat_dim, cfg.codebook_seed, cfg.code_group_size, cfg.code_spread),
        "source_paired": C.make_utterances(sample(g_src, cfg.n_source_paired, "paired"), "src", "S"),
        "source_text": C.make_utterances(sample(g_src, cfg.n_source_text, "srctext"), "srctext", "S"),
        "target_text": C.make_utterances(sample(g_tgt, cfg.n_target_text, "tgttext"), "tgttext", "T"),
        "test": C.make_utterances(sample(g_tgt, cfg.n_test, "test"), "test", "T"),
    }


CORPORA = ("source_paired", "source_text", "target_text", "test")


def gen_data(cfg: ExperimentConfig, ws: Workspace, log: Log = _quiet) -> None:
    ws.root.mkdir(parents=True, exist_ok=True)
    data = build_data(cfg)
    vocab = C.Vocab.default(cfg.vocab_size)
    C.write_grammar(ws.path("grammar_source.txt"), data["grammar_source"])
    C.write_grammar(ws.path("grammar_target.txt"), data["grammar_target"])
    C.write_codebook(ws.path("codebook.txt"), data["codebook"], cfg.derived_seed("features"), cfg.noise_std)
    for name in CORPORA:
        C.write_corpus(ws.path(f"{name}.tsv"), data[name], vocab)
        log(f"wrote {name}.tsv ({len(data[name])} utterances)")
    cfg_path = ws.path("config.txt")
    cfg_path.write_text(cfg.to_text(), encoding="utf-8")
    ws.record("gen-data", cfg, ["grammar_source.txt", "grammar_target.txt", "codebook.txt", "config.txt"] + [f"{n}.tsv" for n in CORPORA])


def _vocab(cfg: ExperimentConfig) -> C.Vocab:
    return C.Vocab.default(cfg.vocab_size)


def load_corpus(cfg: ExperimentConfig, ws: Workspace, name: str) -> List[C.Utterance]:
    return C.read_corpus(ws.need(f"{name}.tsv", "gen-data"), _vocab(cfg))


def load_dataset(cfg: ExperimentConfig, ws: Workspace, name: str) -> C.Dataset:
    codebook, seed, noise = C.read_codebook(ws.need("codebook.txt", "gen-data"))
    return C.Dataset(load_corpus(cfg, ws, name), codebook, noise, seed)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _hyper(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_sha256": cfg.hash(), **extra}


def _epoch_saver(ws: Workspace, name: str, hyper: dict):
    """Callback body that writes ``epochs/<name>.eNN.ckpt`` after every epoch."""
    ws.path(EPOCH_DIR).mkdir(parents=True, exist_ok=True)
    stem = name[: -len(".ckpt")]

    def save(epoch: int, model) -> None:
        save_checkpoint(ws.path(f"{EPOCH_DIR}/{stem}.e{epoch:02d}.ckpt"), model, {**hyper, "epoch": epoch})

    return save


def train_asr_stage(cfg: ExperimentConfig, ws: Workspace, log: Log = _quiet) -> None:
    ds = load_dataset(cfg, ws, "source_paired")
    oc = cfg.asr_optim()
    hyper = _hyper(cfg, epochs=oc.epochs, lr=oc.lr, batch_size=oc.batch_size)
    snap = _epoch_saver(ws, "asr.ckpt", hyper)

    def on_epoch(e, m, loss):
        snap(e, m)
        log(f"asr epoch {e} loss {loss:.6f} ({time.perf_counter() - t0:.1f}s)")

    t0 = time.perf_counter()
    model, _ = train_asr(
        ds,
        oc,
        H=cfg.hidden,
        emb_dim=cfg.emb_dim,
        att_dim=cfg.att_dim,
        on_epoch=on_epoch,
    )
    save_checkpoint(ws.path("asr.ckpt"), model, hyper)
    ws.record("train-asr", cfg, ["asr.ckpt"])


def train_lm_stage(cfg: ExperimentConfig, ws: Workspace, domains: Sequence[str] = ("target", "source"), log: Log = _quiet) -> None:
    outputs = []
    for domain in domains:
        texts = [u.tokens for u in load_corpus(cfg, ws, f"{domain}_text")]
        oc = cfg.lm_optim(domain)
        name = f"lm_{domain}.ckpt"
        hyper = _hyper(cfg, epochs=oc.epochs, lr=oc.lr, domain=domain)
        snap = _epoch_saver(ws, name, hyper)

        def on_epoch(e, m, loss):
            snap(e, m)
            log(f"lm[{domain}] epoch {e} loss {loss:.6f}")

        model, _ = train_lm(
            texts,
            cfg.vocab_size,
            oc,
            H=cfg.hidden,
            layers=cfg.lm_layers,
            emb_dim=cfg.emb_dim,
            on_epoch=on_epoch,
        )
        save_checkpoint(ws.path(name), model, hyper)
        outputs.append(name)
    ws.record("train-lm", cfg, outputs)


def train_residual_stage(
    cfg: ExperimentConfig,
    ws: Workspace,
    objectives: Sequence[str] = ("integrated", "elementwise_mse"),
    log: Log = _quiet,
) -> None:
    asr, _ = load_checkpoint(ws.need("asr.ckpt", "train-asr"), "asr")
    texts = [u.tokens for u in load_corpus(cfg, ws, "target_text")]
    tc = cfg.residual_train()
    outputs = []
    for objective in objectives:
        name = "residual.ckpt" if objective == "integrated" else f"residual_{objective}.ckpt"
        lines = []
        hyper = _hyper(
            cfg, objective=objective, gamma=tc.gamma, omega=tc.omega, temperature=tc.temperature,
            epsilon=tc.epsilon, eta=tc.eta, epochs=tc.epochs, lr=tc.lr,
        )
        snap = _epoch_saver(ws, name, hyper)

        def on_epoch(e, m, h):
            snap(e, m)
            lines.append(format_epoch_line(e, h["ce"], h["mse"], h["total"]))
            log(f"residual[{objective}] {lines[-1]}")

        model, _ = train_residual(
            texts, asr, tc, objective=objective, on_epoch=on_epoch, H=cfg.hidden, layers=cfg.lm_layers, emb_dim=cfg.emb_dim
        )
        save_checkpoint(ws.path(name), model, hyper)
        log_name = name.replace(".ckpt", "_train.log")
        ws.path(log_name).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        outputs += [name, log_name]
    ws.record("train-reslm", cfg, outputs)


# ---------------------------------------------------------------------------
# decoding and evaluation
# ---------------------------------------------------------------------------

def load_bundle(ws: Workspace, method: str) -> ModelBundle:
    variant, res_name = METHODS[method]
    asr, _ = load_checkpoint(ws.need("asr.ckpt", "train-asr"), "asr")
    ext = src = res = None
    if variant in ("shallow", "density_ratio", "ilme"):
        ext, _ = load_checkpoint(ws.need("lm_target.ckpt", "train-lm"), "lm")
    if variant == "density_ratio":
        src, _ = load_checkpoint(ws.need("lm_source.ckpt", "train-lm"), "lm")
    if res_name is not None:
        res, _ = load_checkpoint(ws.need(res_name, "train-reslm"), "residual")
    return ModelBundle(asr, ext, src, res)


def transcript_name(method: str) -> str:
    return f"hyp_{method}.txt"


def decode_stage(cfg: ExperimentConfig, ws: Workspace, methods: Sequence[str], workers: int = 1, log: Log = _quiet) -> None:
    ds = load_dataset(cfg, ws, "test")
    vocab = _vocab(cfg)
    outputs = []
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        bundle = load_bundle(ws, method)
        dec = decode_corpus(ds, bundle, cfg.fusion(METHODS[method][0]), cfg.beam_config(), workers=workers)
        ws.path(transcript_name(method)).write_text(format_transcripts(dec, vocab), encoding="utf-8")
        outputs.append(transcript_name(method))
        log(f"decoded {method}: {len(dec.uids)} utterances in {dec.total_s:.2f}s, {sum(dec.flagged)} flagged")
    ws.record("decode", cfg, outputs)


def evaluate_stage(cfg: ExperimentConfig, ws: Workspace, log: Log = _quiet) -> Dict[str, float]:
    """WER (percent) of every decoded method; writes ``results.txt``.

    ``results.txt`` holds WER only so it is reproducible byte for byte;
    ``results_with_speed.txt`` adds the relative speed column when a timing
    report from ``bench`` exists.
    """
    vocab = _vocab(cfg)
    refs = {u.uid: u.tokens for u in load_corpus(cfg, ws, "test")}
    wers: Dict[str, float] = {}
    for method in TABLE_ORDER:
        p = ws.path(transcript_name(method))
        if not p.exists():
            continue
        hyps = read_transcripts(p, vocab)
        if set(hyps) != set(refs):
            raise ValueError(f"{p}: utterance ids do not match the test set")
        uids = sorted(refs)
        wers[method] = 100.0 * corpus_wer([refs[u] for u in uids], [hyps[u][1] for u in uids])
    if not wers:
        raise MissingArtifactError(ws.path(transcript_name("shallow")), "decode")
    ws.path("results.txt").write_text(format_results_table([(m, w, None) for m, w in wers.items()]), encoding="utf-8")
    outputs = ["results.txt"]
    bench = ws.path("bench.txt")
    if bench.exists():
        speeds = parse_speed_report(bench.read_text(encoding="utf-8"))
        rows = [(m, w, speeds[m][1] if m in speeds else None) for m, w in wers.items()]
        ws.path("results_with_speed.txt").write_text(format_results_table(rows), encoding="utf-8")
        outputs.append("results_with_speed.txt")
    ws.record("evaluate", cfg, outputs)
    for line in ws.path(outputs[-1]).read_text(encoding="utf-8").splitlines():
        log(line)
    return wers


def bench_stage(cfg: ExperimentConfig, ws: Workspace, methods: Sequence[str] = BENCH_METHODS, log: Log = _quiet) -> Dict[str, float]:
    """Single-threaded timing of ``methods`` on the first ``bench_utterances`` test utterances."""
    ds = load_dataset(cfg, ws, "test")
    ds = C.Dataset(ds.utterances[: cfg.bench_utterances], ds.codebook, ds.noise_std, ds.feature_seed)
    if "shallow" not in methods:
        methods = ("shallow",) + tuple(methods)
    bundles = [load_bundle(ws, m) for m in methods]
    # one bundle holding every model so each method sees identical objects
    pick = lambda attr: next((getattr(b, attr) for b in bundles if getattr(b, attr) is not None), None)
    union = ModelBundle(bundles[0].asr, pick("ext_lm"), pick("src_lm"), pick("residual"))
    fm = {m: cfg.fusion(METHODS[m][0]) for m in methods}
    with single_threaded():
        # warm-up pass keeps first-call costs out of the measurement
        decode_corpus(C.Dataset(ds.utterances[:5], ds.codebook, ds.noise_std, ds.feature_seed), union, fm["shallow"], cfg.beam_config())
        times = benchmark(ds, union, fm, cfg.beam_config(), repeats=cfg.bench_repeats)
    report = speed_report(times)
    ws.path("bench.txt").write_text(report, encoding="utf-8")
    ws.record("bench", cfg, ["bench.txt"])
    for line in report.splitlines():
        log(line)
    return times


def read_results(ws: Workspace) -> Dict[str, float]:
    text = ws.need("results.txt", "evaluate").read_text(encoding="utf-8")
    return {m: w for m, w, _ in parse_results_table(text)}


def run_pipeline(
    cfg: ExperimentConfig,
    ws: Workspace,
    log: Log = _quiet,
    bench: bool = True,
    negative_control: bool = True,
) -> Dict[str, float]:
    """gen-data through evaluate (and bench); returns WER per method."""
    gen_data(cfg, ws, log)
    train_asr_stage(cfg, ws, log)
    train_lm_stage(cfg, ws, log=log)
    objectives = ("integrated", "elementwise_mse") if negative_control else ("integrated",)
    train_residual_stage(cfg, ws, objectives, log)
    methods = [m for m in TABLE_ORDER if negative_control or m != "residual_elementwise_mse"]
    decode_stage(cfg, ws, methods, log=log)
    if bench:
        bench_stage(cfg, ws, log=log)
    return evaluate_stage(cfg, ws, log)
