"""Reconstructor network, frozen feature extractors and evaluation classifiers."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

INIT_MODES = ("adjoint", "learned_random")
CLASSIFIER_ARCHS = ("resnet", "plaincnn")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VGG_TAPS = ("relu1_2", "relu2_2", "relu3_3")
DOMAIN_TAPS = ("relu1_2", "relu2_2", "relu3_2")


@contextmanager
def seeded(seed: int):
    """Run a block under a private global RNG state seeded with ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------------------
# reconstructor

@dataclass(frozen=True)
class ReconstructorSpec:
    init_mode: str = "adjoint"
    depth: int = 3
    width: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Single-channel U-Net with ``depth`` resolution levels and a sigmoid head."""

    def __init__(self, depth: int = 3, width: int = 32):
        super().__init__()
        chans = [width * 2 ** i for i in range(depth)]
        self.down = nn.ModuleList()
        cin = 1
        for c in chans:
            self.down.append(_double_conv(cin, c))
            cin = c
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for i in range(depth - 1, 0, -1):
            self.up.append(nn.ConvTranspose2d(chans[i], chans[i - 1], 2, stride=2))
            self.merge.append(_double_conv(2 * chans[i - 1], chans[i - 1]))
        self.head = nn.Conv2d(chans[0], 1, 1)
        self.multiple = 2 ** (depth - 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        ph, pw = -h % self.multiple, -w % self.multiple
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([up(x), skips.pop()], dim=1))
        return torch.sigmoid(self.head(x))[..., :h, :w]


class Reconstructor(nn.Module):
    """U-Net fed either the adjoint proxy or a trainable dense lift of ``y``.

    ``adjoint`` mode has no trainable measurement-to-image stage. In
    ``learned_random`` mode a randomly initialised ``Linear(M, H*W)`` replaces
    ``A^T`` and is trained with the rest of the network.
    """

    def __init__(self, spec: ReconstructorSpec, m: int, height: int, width: int):
        super().__init__()
        self.spec = spec
        self.m, self.height, self.width = m, height, width
        with seeded(spec.seed):
            self.lift = nn.Linear(m, height * width) if spec.init_mode == "learned_random" else None
            self.unet = UNet(spec.depth, spec.width)

    def initial_image(self, op, y: torch.Tensor) -> torch.Tensor:
        """The image handed to the U-Net for measurements ``y`` of shape (B, M)."""
        from .sensing import adjoint_proxy, normalize_proxy
        if y.shape[-1] != self.m:
            raise ValueError(f"expected {self.m} measurements per item, got {y.shape[-1]}")
        if self.lift is None:
            return normalize_proxy(adjoint_proxy(op, y))
        return self.lift(y).reshape(-1, self.height, self.width)

    def forward(self, x_init: torch.Tensor) -> torch.Tensor:
        return self.unet(x_init.unsqueeze(1)).squeeze(1)

    def from_measurements(self, op, y: torch.Tensor) -> torch.Tensor:
        return self(self.initial_image(op, y))

    def metadata(self) -> dict:
        return {"spec": asdict(self.spec), "m": self.m, "height": self.height,
                "width": self.width, "parameters": count_parameters(self)}


def build_reconstructor(spec: ReconstructorSpec, m: int, height: int, width: int) -> Reconstructor:
    return Reconstructor(spec, m, height, width)


@torch.no_grad()
def reconstruct(model: Reconstructor, proxy: torch.Tensor) -> torch.Tensor:
    """Inference on a batch of network inputs ``(B, H, W)``."""
    if proxy.dim() != 3 or tuple(proxy.shape[1:]) != (model.height, model.width):
        raise ValueError(f"input of shape {tuple(proxy.shape)} does not match "
                         f"{model.height}x{model.width}")
    if proxy.shape[0] == 0:
        return proxy.clone()
    was_training = model.training
    model.eval()
    out = model(proxy)
    model.train(was_training)
    return out


def save_reconstructor(model: Reconstructor, path, extra: dict | None = None) -> None:
    path = Path(path)
    torch.save(model.state_dict(), path)
    meta = {**model.metadata(), **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_reconstructor(path) -> Reconstructor:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    model = Reconstructor(ReconstructorSpec(**meta["spec"]), meta["m"], meta["height"], meta["width"])
    model.load_state_dict(torch.load(path, weights_only=True))
    return model


# ---------------------------------------------------------------------------
# classifiers

class PlainCNN(nn.Module):
    """VGG-style stack of 3x3 convs; its trunk doubles as a feature extractor."""

    def __init__(self, num_classes: int = 10, width: int = 16, mean: float = 0.0, std: float = 1.0):
        super().__init__()
        w = width
        self.register_buffer("mean", torch.tensor([mean]))
        self.register_buffer("std", torch.tensor([std]))
        layers = [
            ("conv1_1", nn.Conv2d(1, w, 3, padding=1)), ("relu1_1", nn.ReLU()),
            ("conv1_2", nn.Conv2d(w, w, 3, padding=1)), ("relu1_2", nn.ReLU()),
            ("pool1", nn.MaxPool2d(2)),
            ("conv2_1", nn.Conv2d(w, 2 * w, 3, padding=1)), ("relu2_1", nn.ReLU()),
            ("conv2_2", nn.Conv2d(2 * w, 2 * w, 3, padding=1)), ("relu2_2", nn.ReLU()),
            ("pool2", nn.MaxPool2d(2)),
            ("conv3_1", nn.Conv2d(2 * w, 4 * w, 3, padding=1)), ("relu3_1", nn.ReLU()),
            ("conv3_2", nn.Conv2d(4 * w, 4 * w, 3, padding=1)), ("relu3_2", nn.ReLU()),
        ]
        self.features = nn.Sequential()
        for name, layer in layers:
            self.features.add_module(name, layer)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.fc = nn.Linear(4 * w * 4, num_classes)

    def forward(self, x):
        x = (x.unsqueeze(1) - self.mean) / self.std
        return self.fc(self.pool(self.features(x)).flatten(1))


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = nn.Identity()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                       nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + self.short(x))


class ResidualCNN(nn.Module):
    def __init__(self, num_classes: int = 10, width: int = 16, mean: float = 0.0, std: float = 1.0):
        super().__init__()
        self.register_buffer("mean", torch.tensor([mean]))
        self.register_buffer("std", torch.tensor([std]))
        self.stem = nn.Sequential(nn.Conv2d(1, width, 3, padding=1, bias=False),
                                  nn.BatchNorm2d(width), nn.ReLU())
        self.blocks = nn.Sequential(_ResBlock(width, width, 1), _ResBlock(width, 2 * width, 2),
                                    _ResBlock(2 * width, 4 * width, 2))
        self.fc = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        x = (x.unsqueeze(1) - self.mean) / self.std
        x = self.blocks(self.stem(x))
        return self.fc(x.mean(dim=(2, 3)))


def make_classifier(arch: str, num_classes: int = 10, mean: float = 0.0, std: float = 1.0) -> nn.Module:
    if arch == "resnet":
        return ResidualCNN(num_classes, mean=mean, std=std)
    if arch == "plaincnn":
        return PlainCNN(num_classes, mean=mean, std=std)
    raise ValueError(f"unknown classifier architecture {arch!r}; choose from {CLASSIFIER_ARCHS}")


@dataclass
class ClassifierHandle:
    arch: str
    dataset: str
    module: nn.Module = field(repr=False)
    clean_accuracy: float
    seed: int
    frozen: bool = True
    input_shape: tuple[int, int] = (28, 28)

    def metadata(self) -> dict:
        return {"arch": self.arch, "dataset": self.dataset, "clean_accuracy": self.clean_accuracy,
                "seed": self.seed, "frozen": self.frozen, "input_shape": list(self.input_shape),
                "num_classes": self.module.fc.out_features,
                "mean": float(self.module.mean), "std": float(self.module.std),
                "parameters": count_parameters(self.module, trainable_only=False),
                "checksum": parameter_checksum(self.module)}


@torch.no_grad()
def _logits(module: nn.Module, images: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
    module.eval()
    chunks = [module(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(chunks) if chunks else torch.empty(0, module.fc.out_features)


def classify(handle: ClassifierHandle, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Predicted labels and softmax scores for a ``(B, H, W)`` batch in [0, 1]."""
    if images.dim() != 3 or tuple(images.shape[1:]) != tuple(handle.input_shape):
        raise ValueError(f"batch of shape {tuple(images.shape)} does not match classifier "
                         f"input {tuple(handle.input_shape)}")
    scores = torch.softmax(_logits(handle.module, images.clamp(0, 1)), dim=1)
    return scores.argmax(dim=1), scores


def train_classifier(dataset, arch: str = "plaincnn", seed: int = 0, epochs: int = 3,
                     batch_size: int = 128, lr: float = 2e-3) -> ClassifierHandle:
    """Train on clean training images, freeze, and record clean test accuracy."""
    if dataset.train_labels is None or len(dataset.train_labels) != len(dataset.train_images):
        raise ValueError("classifier training needs one label per training image")
    x, y = dataset.train_images, dataset.train_labels
    mean, std = float(x.mean()), float(x.std())
    with seeded(seed):
        module = make_classifier(arch, int(y.max()) + 1, mean, std)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=lr, total_steps=epochs * -(-len(x) // batch_size))
    gen = torch.Generator().manual_seed(seed)
    module.train()
    for epoch in range(epochs):
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(module(x[idx]), y[idx])
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        log.info("%s epoch %d: train loss %.4f", arch, epoch + 1, total / len(x))
    freeze(module)
    handle = ClassifierHandle(arch, dataset.tag, module, 0.0, seed,
                              input_shape=tuple(x.shape[1:]))
    pred, _ = classify(handle, dataset.test_images)
    handle.clean_accuracy = float((pred == dataset.test_labels).double().mean())
    log.info("%s frozen at clean test accuracy %.4f", arch, handle.clean_accuracy)
    return handle


def save_classifier(handle: ClassifierHandle, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(handle.module.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(handle.metadata(), indent=2))


def load_classifier(path) -> ClassifierHandle:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    module = make_classifier(meta["arch"], meta["num_classes"], meta["mean"], meta["std"])
    module.load_state_dict(torch.load(path, weights_only=True))
    freeze(module)
    if parameter_checksum(module) != meta["checksum"]:
        raise ValueError(f"{path}: parameter checksum does not match its metadata")
    return ClassifierHandle(meta["arch"], meta["dataset"], module, meta["clean_accuracy"],
                            meta["seed"], input_shape=tuple(meta["input_shape"]))


# ---------------------------------------------------------------------------
# feature extractors

class FeatureExtractorUnavailable(RuntimeError):
    pass


_VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256)


def _vgg16_trunk() -> nn.Sequential:
    """VGG-16 ``features`` up to relu3_3 with torchvision's layer indices."""
    layers, names = [], []
    cin, block, conv = 3, 1, 1
    for v in _VGG16_CFG:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
            names.append(f"pool{block}")
            block, conv = block + 1, 1
        else:
            layers += [nn.Conv2d(cin, v, 3, padding=1), nn.ReLU(inplace=False)]
            names += [f"conv{block}_{conv}", f"relu{block}_{conv}"]
            cin, conv = v, conv + 1
    return nn.Sequential(*layers), names


class FeatureExtractor(nn.Module):
    """Frozen conv trunk returning activations at named tap points.

    Inputs are ``(B, H, W)`` grayscale batches; they are replicated to the
    trunk's channel count and normalised with its fixed per-channel
    statistics before the forward pass.
    """

    def __init__(self, kind: str, trunk: nn.Sequential, names, taps, mean, std):
        super().__init__()
        missing = [t for t in taps if t not in names]
        if missing:
            raise ValueError(f"tap points {missing} are not layers of the {kind} trunk")
        self.kind = kind
        self.taps = tuple(taps)
        stop = max(names.index(t) for t in taps) + 1
        self.trunk = trunk[:stop]
        self.tap_index = {names.index(t): t for t in taps}
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))
        freeze(self)

    def train(self, mode: bool = True):
        # frozen: never leave eval mode
        return super().train(False)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = images.unsqueeze(1).expand(-1, self.mean.shape[1], -1, -1)
        x = (x - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.trunk):
            x = layer(x)
            if i in self.tap_index:
                feats.append(x)
        return feats


def extract_features(extractor: FeatureExtractor, images: torch.Tensor) -> list[torch.Tensor]:
    return extractor(images)


def vgg_extractor(taps=VGG_TAPS, weights_path=None, pretrained: bool = True) -> FeatureExtractor:
    """ImageNet VGG-16 trunk.

    With ``pretrained=True`` weights come from ``weights_path`` or torchvision's
    local cache; no download is attempted. ``pretrained=False`` keeps random
    weights, which is only useful for shape checks.
    """
    trunk, names = _vgg16_trunk()
    if pretrained:
        state = _load_vgg_state(weights_path)
        own = trunk.state_dict()
        trunk.load_state_dict({k: state[f"features.{k}"] for k in own})
    return FeatureExtractor("pretrained_perceptual", trunk, names, taps, IMAGENET_MEAN, IMAGENET_STD)


def _load_vgg_state(weights_path):
    if weights_path is None:
        from torchvision.models import VGG16_Weights
        url = VGG16_Weights.IMAGENET1K_V1.url
        weights_path = Path(torch.hub.get_dir()) / "checkpoints" / Path(url).name
    weights_path = Path(weights_path)
    if not weights_path.exists():
        raise FeatureExtractorUnavailable(f"VGG-16 weights not found at {weights_path}")
    return torch.load(weights_path, map_location="cpu", weights_only=True)


def domain_extractor(handle: ClassifierHandle, taps=DOMAIN_TAPS) -> FeatureExtractor:
    """Trunk of a frozen ``plaincnn`` evaluation classifier."""
    if not isinstance(handle.module, PlainCNN):
        raise ValueError("domain_cnn features need a plaincnn classifier")
    names = [n for n, _ in handle.module.features.named_children()]
    trunk = copy.deepcopy(handle.module.features)
    return FeatureExtractor("domain_cnn", trunk, names, taps,
                            [float(handle.module.mean)], [float(handle.module.std)])


def build_extractor(kind: str, classifier: ClassifierHandle | None = None,
                    weights_path=None) -> FeatureExtractor:
    """Resolve ``kind`` (``auto`` tries pretrained weights, then the domain CNN)."""
    if kind in ("pretrained_perceptual", "auto"):
        try:
            return vgg_extractor(weights_path=weights_path)
        except FeatureExtractorUnavailable:
            if kind != "auto":
                raise
            log.warning("pretrained VGG-16 weights unavailable; using domain_cnn features")
    if kind not in ("domain_cnn", "auto"):
        raise ValueError(f"unknown feature extractor kind {kind!r}")
    if classifier is None:
        raise ValueError("domain_cnn features need a trained plaincnn classifier")
    return domain_extractor(classifier)
