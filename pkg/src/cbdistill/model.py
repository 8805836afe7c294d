"""MLP feature extractor, cosine classifier, projection head and NCM probe."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor, affine, l2_normalize, matmul, relu, scale, transpose

DEFAULT_GAMMA = 16.0
NORM_EPS = 1e-12


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def he_normal(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def unit_columns(d: int, c: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.standard_normal((d, c))
    return w / np.linalg.norm(w, axis=0, keepdims=True)


class FeatureExtractor:
    """ReLU MLP; the last layer is linear so descriptors can take any sign."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, widths: list[int], seed: int) -> "FeatureExtractor":
        rng = rng_for(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            ws.append(Tensor(he_normal(fan_in, fan_out, rng), requires_grad=True))
            bs.append(Tensor(np.zeros(fan_out), requires_grad=True))
        return cls(ws, bs)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x: Tensor) -> Tensor:
        return extract(self, x)


def extract(fe: FeatureExtractor, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != fe.in_dim:
        raise ShapeError(f"extractor expects width {fe.in_dim}, got input shape {x.shape}")
    h = x
    last = len(fe.weights) - 1
    for i, (w, b) in enumerate(zip(fe.weights, fe.biases)):
        h = affine(h, w, b)
        if i < last:
            h = relu(h)
    return h


class CosineClassifier:
    def __init__(self, W: Tensor, gamma: float = DEFAULT_GAMMA):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.W = W
        self.gamma = float(gamma)

    @classmethod
    def init(cls, d: int, c: int, seed: int, gamma: float = DEFAULT_GAMMA) -> "CosineClassifier":
        return cls(Tensor(unit_columns(d, c, rng_for(seed)), requires_grad=True), gamma)

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.W]

    def __call__(self, v: Tensor) -> Tensor:
        return classify(self, v)


def classify(cc: CosineClassifier, v: Tensor) -> Tensor:
    """gamma * cos(v_i, w_j) for every row i and class column j."""
    if v.ndim != 2 or v.shape[1] != cc.W.shape[0]:
        raise ShapeError(f"classifier expects width {cc.W.shape[0]}, got {v.shape}")
    w_bar = transpose(l2_normalize(transpose(cc.W), NORM_EPS))
    return scale(matmul(l2_normalize(v, NORM_EPS), w_bar), cc.gamma)


class ProjectionHead:
    """Affine map R^d -> R^(d*K) feeding the classifier in the ensemble variant."""

    def __init__(self, weight: Tensor, bias: Tensor, K: int):
        self.weight = weight
        self.bias = bias
        self.K = K

    @classmethod
    def block_identity(cls, d: int, K: int) -> "ProjectionHead":
        # K stacked identities scaled by 1/sqrt(K): every teacher block starts aligned with v
        w = np.tile(np.eye(d), (1, K)) / np.sqrt(K)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(d * K), requires_grad=True), K)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, v: Tensor) -> Tensor:
        return project(self, v)


def project(h: ProjectionHead, v: Tensor) -> Tensor:
    if v.ndim != 2 or v.shape[1] != h.in_dim:
        raise ShapeError(f"projection head expects width {h.in_dim}, got {v.shape}")
    return affine(v, h.weight, h.bias)


@dataclass
class Forward:
    features: Tensor   # v, the extractor output
    embedding: Tensor  # h(v) when a head is present, else v
    logits: Tensor


class Model:
    """Extractor, optional projection head, cosine classifier."""

    def __init__(self, extractor: FeatureExtractor, classifier: CosineClassifier,
                 head: ProjectionHead | None = None):
        d_eff = head.out_dim if head is not None else extractor.out_dim
        if head is not None and head.in_dim != extractor.out_dim:
            raise ShapeError("projection head input must match extractor output")
        if classifier.W.shape[0] != d_eff:
            raise ShapeError(f"classifier width {classifier.W.shape[0]} != feature width {d_eff}")
        self.extractor = extractor
        self.classifier = classifier
        self.head = head

    @classmethod
    def init(cls, widths: list[int], num_classes: int, seed: int,
             gamma: float = DEFAULT_GAMMA, K: int | None = None) -> "Model":
        """Fresh model; ``K`` adds a block-identity projection head."""
        ext_seed, cls_seed = np.random.SeedSequence(seed).generate_state(2)
        ext = FeatureExtractor.init(widths, int(ext_seed))
        head = ProjectionHead.block_identity(widths[-1], K) if K else None
        d_eff = head.out_dim if head else widths[-1]
        return cls(ext, CosineClassifier.init(d_eff, num_classes, int(cls_seed), gamma), head)

    def parameters(self) -> list[Tensor]:
        ps = self.extractor.parameters()
        if self.head is not None:
            ps += self.head.parameters()
        return ps + self.classifier.parameters()

    def forward(self, x) -> Forward:
        x = x if isinstance(x, Tensor) else Tensor(x)
        v = self.extractor(x)
        e = self.head(v) if self.head is not None else v
        return Forward(v, e, self.classifier(e))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x)).logits.data

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Classifier-input features, i.e. h(v) with a head and v without."""
        return self.forward(Tensor(x)).embedding.data

    def descriptors(self, x: np.ndarray) -> np.ndarray:
        return self.extractor(Tensor(x)).data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def copy(self) -> "Model":
        def dup(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        ext = FeatureExtractor([dup(w) for w in self.extractor.weights],
                               [dup(b) for b in self.extractor.biases])
        head = None
        if self.head is not None:
            head = ProjectionHead(dup(self.head.weight), dup(self.head.bias), self.head.K)
        return Model(ext, CosineClassifier(dup(self.classifier.W), self.classifier.gamma), head)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.extractor.weights, self.extractor.biases)):
            out[f"extractor.{i}.weight"] = w.data
            out[f"extractor.{i}.bias"] = b.data
        if self.head is not None:
            out["head.weight"] = self.head.weight.data
            out["head.bias"] = self.head.bias.data
        out["classifier.W"] = self.classifier.W.data
        return out


def init_params(widths: list[int], num_classes: int, seed: int, gamma: float = DEFAULT_GAMMA,
                K: int | None = None) -> Model:
    """He-normal extractor layers, zero biases, unit-column classifier weights."""
    return Model.init(widths, num_classes, seed, gamma, K)


# --- checkpoints ---------------------------------------------------------

def save_model(m: Model, path, config_hash: str = "") -> None:
    """npz container: little-endian float64 arrays plus a JSON metadata record."""
    meta = {"widths": m.extractor.widths, "gamma": m.classifier.gamma,
            "num_classes": m.classifier.num_classes,
            "K": m.head.K if m.head is not None else None,
            "config_hash": config_hash}
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in m.state().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> tuple[Model, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        n = len(meta["widths"]) - 1
        t = lambda k: Tensor(z[k].astype(np.float64), requires_grad=True)  # noqa: E731
        ext = FeatureExtractor([t(f"extractor.{i}.weight") for i in range(n)],
                               [t(f"extractor.{i}.bias") for i in range(n)])
        head = ProjectionHead(t("head.weight"), t("head.bias"), meta["K"]) if meta["K"] else None
        return Model(ext, CosineClassifier(t("classifier.W"), meta["gamma"]), head), meta


# --- nearest class mean --------------------------------------------------

class EmptyClassError(ValueError):
    pass


@dataclass
class NCMClassifier:
    centroids: np.ndarray  # c x d, unit rows

    def predict(self, v: np.ndarray) -> np.ndarray:
        return ncm_predict(self, v)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), NORM_EPS)


def fit_ncm(features: np.ndarray, labels: np.ndarray, num_classes: int | None = None) -> NCMClassifier:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=c)
    if np.any(counts == 0):
        raise EmptyClassError(f"no features for classes {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((c, features.shape[1]))
    np.add.at(sums, labels, _unit_rows(features))
    return NCMClassifier(_unit_rows(sums / counts[:, None]))


def ncm_predict(ncm: NCMClassifier, v: np.ndarray) -> np.ndarray:
    """Highest cosine to a centroid; np.argmax already resolves ties to the lowest id."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    return np.argmax(_unit_rows(v) @ ncm.centroids.T, axis=1)
