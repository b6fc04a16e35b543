"""Classifier estimator, binary model serialization, and the model zoo.

`ConvNetClassifier` follows the scikit-learn estimator protocol
(`fit`/`predict`/`decision_function`/`get_params`) on top of the
float32 autodiff engine.  Training is plain SGD with momentum; setting
`adversarial_epsilon` > 0 augments every minibatch with single-step
sign-gradient examples at that budget and averages the clean and
adversarial losses.

Model files are a fixed binary layout:

    magic (8 bytes) | version (u32 LE) | header length (u32 LE) |
    canonical JSON header | little-endian float32 parameter blob

The header carries the architecture spec in canonical text form plus the
training hyperparameters, and the blob concatenates parameters in the
architecture's declaration order.  `save -> load -> save` reproduces the
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .errors import (
    ConfigError,
    IntegrityError,
    ModelFormatError,
    TrainingDivergenceError,
)
from .networks import ArchitectureSpec, forward, get_architecture, init_parameters
from .validation import (
    check_images,
    check_labels,
    check_matching_lengths,
)

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"MGCONV01"
MODEL_VERSION = 1
_PREDICT_CHUNK = 512


class ConvNetClassifier(BaseEstimator, ClassifierMixin):
    """Tiny convolutional classifier over 0-255 pixel images.

    Parameters
    ----------
    architecture : str or ArchitectureSpec
        Name from the registry or an explicit spec.
    epochs, learning_rate, momentum, batch_size : SGD settings.
    adversarial_epsilon : float
        If > 0, each minibatch is augmented with single-step
        sign-gradient examples at this L-inf budget (pixel units) and
        the loss becomes the mean of the clean and adversarial terms.
        0 reduces bitwise to plain training.
    seed : int
        Drives parameter init and minibatch shuffling.
    """

    def __init__(
        self,
        architecture="slim8",
        epochs: int = 8,
        learning_rate: float = 0.05,
        momentum: float = 0.9,
        batch_size: int = 32,
        adversarial_epsilon: float = 0.0,
        seed: int = 0,
    ):
        self.architecture = architecture
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.adversarial_epsilon = adversarial_epsilon
        self.seed = seed

    # -- scikit-learn surface -------------------------------------------------

    def fit(self, X, y):
        spec = get_architecture(self.architecture)
        X = check_images(X)
        y = check_labels(y, spec.classes)
        check_matching_lengths(X, y)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.adversarial_epsilon < 0:
            raise ConfigError(
                f"adversarial_epsilon must be >= 0, got {self.adversarial_epsilon}"
            )

        init_rng, shuffle_rng = (
            np.random.default_rng(s)
            for s in np.random.SeedSequence(self.seed).spawn(2)
        )
        self.architecture_ = spec
        self.classes_ = np.arange(spec.classes)
        self.input_shape_ = X.shape[1:]
        self.params_ = init_parameters(spec, init_rng)
        self.adversarially_trained_ = self.adversarial_epsilon > 0

        velocity = {k: np.zeros_like(t.data) for k, t in self.params_.items()}
        mu = np.float32(self.momentum)
        n = X.shape[0]
        for epoch in range(self.epochs):
            # Step decay in thirds: full rate, half, quarter.  The hot
            # start learns the shapes, the cool end settles the margins.
            lr = np.float32(
                self.learning_rate * 0.5 ** ((3 * epoch) // self.epochs)
            )
            order = shuffle_rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = order[start : start + self.batch_size]
                loss = self._step(X[batch], y[batch], velocity, lr, mu)
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(
                        f"loss became non-finite at epoch {epoch}, batch "
                        f"{start // self.batch_size} (lr={self.learning_rate})"
                    )
        self.train_accuracy_ = float(np.mean(self.predict(X) == y))
        return self

    def _step(self, bx, by, velocity, lr, mu):
        # Build the sign-gradient examples before enabling parameter
        # gradients so the extra backward sweep stays input-only.
        adv = None
        if self.adversarial_epsilon > 0:
            adv = self._fgsm_batch(bx, by, self.adversarial_epsilon)
        for t in self.params_.values():
            t.requires_grad = True
        try:
            with ad.ComputationRecord() as rec:
                clean_loss = ad.softmax_cross_entropy(
                    forward(self.architecture_, self.params_, ad.tensor(bx)), by
                )
                if adv is None:
                    loss = clean_loss
                else:
                    adv_loss = ad.softmax_cross_entropy(
                        forward(self.architecture_, self.params_, ad.tensor(adv)), by
                    )
                    loss = ad.weighted_sum([clean_loss, adv_loss], [0.5, 0.5])
            grads = ad.backward(rec, loss)
        finally:
            for t in self.params_.values():
                t.requires_grad = False
        for name, t in self.params_.items():
            v = velocity[name]
            v *= mu
            v += grads[t]
            t.data -= lr * v
        return float(loss.data)

    def _fgsm_batch(self, bx, by, epsilon):
        g = self.input_gradient(bx, by)
        stepped = bx + np.float32(epsilon) * np.sign(g)
        return np.clip(stepped, 0.0, 255.0)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_images(X)
        outs = []
        for start in range(0, X.shape[0], _PREDICT_CHUNK):
            chunk = ad.tensor(X[start : start + _PREDICT_CHUNK])
            outs.append(forward(self.architecture_, self.params_, chunk).data)
        return np.concatenate(outs, axis=0)

    # -- attack-facing surface ------------------------------------------------

    def logits(self, x: ad.Tensor) -> ad.Tensor:
        """Differentiable logits; records onto the ambient tape."""
        self._check_fitted()
        return forward(self.architecture_, self.params_, x)

    def input_gradient(self, X, labels) -> np.ndarray:
        """Gradient of the batch-mean cross-entropy w.r.t. the input
        pixels.  For targeted objectives pass the target labels; the
        caller decides the sign convention."""
        self._check_fitted()
        X = check_images(X)
        labels = check_labels(labels, self.architecture_.classes)
        check_matching_lengths(X, labels)
        t = ad.Tensor(X, requires_grad=True)
        with ad.ComputationRecord() as rec:
            loss = ad.softmax_cross_entropy(self.logits(t), labels)
        ad.backward(rec, loss)
        return t.grad

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError(
                "this ConvNetClassifier is not fitted; call fit or load a model"
            )

    # -- serialization ----------------------------------------------------------

    def _header_dict(self) -> dict:
        return {
            "architecture": self.architecture_.to_dict(),
            "hyper": {
                "epochs": self.epochs,
                "learning_rate": self.learning_rate,
                "momentum": self.momentum,
                "batch_size": self.batch_size,
                "adversarial_epsilon": self.adversarial_epsilon,
                "seed": self.seed,
            },
            "train_accuracy": getattr(self, "train_accuracy_", None),
        }

    def to_bytes(self) -> bytes:
        self._check_fitted()
        header = json.dumps(
            self._header_dict(), sort_keys=True, separators=(",", ":")
        ).encode("utf-8")
        blob = b"".join(
            self.params_[name].data.astype("<f4").tobytes()
            for name, _ in self.architecture_.parameter_layout()
        )
        return (
            MODEL_MAGIC
            + struct.pack("<I", MODEL_VERSION)
            + struct.pack("<I", len(header))
            + header
            + blob
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ConvNetClassifier":
        if len(raw) < len(MODEL_MAGIC) + 8:
            raise ModelFormatError("truncated model file: missing header")
        magic = raw[: len(MODEL_MAGIC)]
        if magic != MODEL_MAGIC:
            raise ModelFormatError(
                f"unrecognized magic {magic!r}: not a supported model "
                f"format/version (expected {MODEL_MAGIC!r})"
            )
        offset = len(MODEL_MAGIC)
        version, header_len = struct.unpack_from("<II", raw, offset)
        offset += 8
        if version != MODEL_VERSION:
            raise ModelFormatError(
                f"unsupported model file version {version} (expected {MODEL_VERSION})"
            )
        if offset + header_len > len(raw):
            raise ModelFormatError("truncated model file: header cut short")
        try:
            header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"corrupt model header: {exc}") from exc
        offset += header_len

        spec = ArchitectureSpec.from_dict(header["architecture"])
        hyper = header["hyper"]
        clf = cls(
            architecture=spec,
            epochs=hyper["epochs"],
            learning_rate=hyper["learning_rate"],
            momentum=hyper["momentum"],
            batch_size=hyper["batch_size"],
            adversarial_epsilon=hyper["adversarial_epsilon"],
            seed=hyper["seed"],
        )
        layout = spec.parameter_layout()
        expected = sum(int(np.prod(shape)) for _, shape in layout) * 4
        blob = raw[offset:]
        if len(blob) < expected:
            raise ModelFormatError(
                f"truncated model file: parameter blob holds {len(blob)} bytes, "
                f"architecture needs {expected}"
            )
        if len(blob) > expected:
            raise ModelFormatError(
                f"parameter blob size mismatch: {len(blob)} bytes for an "
                f"architecture needing {expected}"
            )
        params = {}
        pos = 0
        for name, shape in layout:
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            params[name] = ad.tensor(arr.reshape(shape))
            pos += count * 4
        clf.architecture_ = spec
        clf.classes_ = np.arange(spec.classes)
        clf.input_shape_ = (spec.in_channels, spec.image_size, spec.image_size)
        clf.params_ = params
        clf.adversarially_trained_ = hyper["adversarial_epsilon"] > 0
        if header.get("train_accuracy") is not None:
            clf.train_accuracy_ = header["train_accuracy"]
        return clf

    @classmethod
    def load(cls, path) -> "ConvNetClassifier":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model zoo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZooMember:
    """Roster entry: which architecture to train under which role, with
    optional per-member training overrides.

    Adversarially trained members mix sign-gradient examples at
    `adversarial_epsilon` into every minibatch; that slows convergence,
    so those members (and the global-average-pool ones, whose head
    shrinks the gradient signal) carry longer schedules."""

    name: str
    architecture: str
    role: str  # "white" or "black"
    adversarial_epsilon: float = 0.0
    epochs: int | None = None  # None falls back to the build default
    learning_rate: float | None = None

    def __post_init__(self):
        if self.role not in ("white", "black"):
            raise ConfigError(
                f"member role must be 'white' or 'black', got {self.role!r}"
            )


# Ten white-box members (eight plain, two adversarially trained) and
# three held-out black-box members (two plain unseen architectures plus
# one adversarially trained), all pairwise distinct architectures.
DESK_ZOO_MEMBERS = (
    ZooMember("w0_slim8", "slim8", "white"),
    ZooMember("w1_wide32", "wide32", "white"),
    ZooMember("w2_deep3", "deep3", "white"),
    ZooMember("w3_deep4", "deep4", "white"),
    ZooMember("w4_kern5", "kern5", "white"),
    ZooMember("w5_gap32", "gap32", "white", epochs=16, learning_rate=0.08),
    ZooMember("w6_densehead", "densehead", "white"),
    ZooMember("w7_wide24h", "wide24h", "white", epochs=16),
    ZooMember(
        "w8_adv_wide36", "wide36", "white",
        adversarial_epsilon=4.0, epochs=16,
    ),
    ZooMember(
        "w9_adv_wide28", "wide28", "white",
        adversarial_epsilon=4.0, epochs=16,
    ),
    ZooMember("b0_gap20", "gap20", "black"),
    ZooMember("b1_kern5h", "kern5h", "black"),
    ZooMember(
        "b2_adv_gap24", "gap24", "black",
        adversarial_epsilon=4.0, epochs=20, learning_rate=0.08,
    ),
)


@dataclass
class ModelZoo:
    """A named collection of classifiers split into white-box members
    (visible to the attacker) and held-out black-box members.

    `accuracies` optionally records each member's evaluation accuracy at
    build time; it rides along in the manifest but stays out of the
    fingerprint, which covers names and weights only."""

    models: list
    names: list
    white_box_indices: list
    black_box_indices: list
    accuracies: list | None = None

    def __post_init__(self):
        roles = sorted(self.white_box_indices) + sorted(self.black_box_indices)
        if roles != list(range(len(self.models))):
            raise ConfigError(
                "white and black box indices must partition the model list"
            )
        if len(self.names) != len(self.models):
            raise ConfigError("one name per model required")
        if self.accuracies is not None and len(self.accuracies) != len(self.models):
            raise ConfigError("one accuracy per model required when given")

    @property
    def white_models(self) -> list:
        return [self.models[i] for i in self.white_box_indices]

    @property
    def black_models(self) -> list:
        return [self.models[i] for i in self.black_box_indices]

    def role_of(self, index: int) -> str:
        return "white" if index in self.white_box_indices else "black"

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, model in zip(self.names, self.models):
            h.update(name.encode("utf-8"))
            h.update(hashlib.sha256(model.to_bytes()).digest())
        return h.hexdigest()

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        members = []
        for i, (name, model) in enumerate(zip(self.names, self.models)):
            raw = model.to_bytes()
            filename = f"{name}.model"
            (directory / filename).write_bytes(raw)
            entry = {
                "name": name,
                "file": filename,
                "role": self.role_of(i),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
            if self.accuracies is not None:
                entry["eval_accuracy"] = self.accuracies[i]
            members.append(entry)
        manifest = {"members": members, "fingerprint": self.fingerprint()}
        (directory / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n"
        )

    @classmethod
    def load(cls, directory, verify: bool = True) -> "ModelZoo":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise IntegrityError(f"no manifest.json under {directory}")
        manifest = json.loads(manifest_path.read_text())
        models, names, white, black, accuracies = [], [], [], [], []
        for i, member in enumerate(manifest["members"]):
            raw = (directory / member["file"]).read_bytes()
            if verify:
                digest = hashlib.sha256(raw).hexdigest()
                if digest != member["sha256"]:
                    raise IntegrityError(
                        f"model file {member['file']} hash {digest[:12]}... does "
                        f"not match manifest {member['sha256'][:12]}..."
                    )
            models.append(ConvNetClassifier.from_bytes(raw))
            names.append(member["name"])
            accuracies.append(member.get("eval_accuracy"))
            (white if member["role"] == "white" else black).append(i)
        if any(a is None for a in accuracies):
            accuracies = None
        zoo = cls(models, names, white, black, accuracies)
        if verify and zoo.fingerprint() != manifest["fingerprint"]:
            raise IntegrityError("zoo fingerprint does not match manifest")
        return zoo


def build_zoo(
    X,
    y,
    eval_X=None,
    eval_y=None,
    members=DESK_ZOO_MEMBERS,
    seed: int = 0,
    epochs: int = 12,
    learning_rate: float = 0.05,
    accuracy_floor: float = 0.95,
) -> ModelZoo:
    """Train every zoo member on (X, y) with per-member seed streams.

    `epochs` and `learning_rate` are defaults that individual roster
    entries may override.  Each member must reach `accuracy_floor` on
    the evaluation split (falls back to the training split when none is
    given); a shortfall raises IntegrityError because downstream success
    rates assume the zoo classifies its domain reliably.
    """
    models, names, white, black, accuracies = [], [], [], [], []
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(members))]
    if eval_X is None:
        eval_X, eval_y = X, y
    for i, member in enumerate(members):
        clf = ConvNetClassifier(
            architecture=member.architecture,
            epochs=member.epochs if member.epochs is not None else epochs,
            learning_rate=(
                member.learning_rate
                if member.learning_rate is not None
                else learning_rate
            ),
            adversarial_epsilon=member.adversarial_epsilon,
            seed=seeds[i],
        )
        logger.info(
            "training zoo member %s (%s, %s, eps=%g)",
            member.name, member.architecture, member.role,
            member.adversarial_epsilon,
        )
        clf.fit(X, y)
        accuracy = float(np.mean(clf.predict(eval_X) == eval_y))
        if accuracy < accuracy_floor:
            raise IntegrityError(
                f"zoo member {member.name} reached {accuracy:.3f} accuracy, "
                f"below the {accuracy_floor:.2f} floor"
            )
        logger.info("member %s eval accuracy %.3f", member.name, accuracy)
        models.append(clf)
        names.append(member.name)
        accuracies.append(accuracy)
        (white if member.role == "white" else black).append(i)
    return ModelZoo(models, names, white, black, accuracies)
