"""Full verification model: encoders, shared attention, compression, heads.

Training runs both branches on aligned image/cloud pairs of the same
identity; inference embeds through the 2D path only. All parameters are
created from the experiment seed so two builds from the same config are
bitwise identical.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import entropy, margin
from .attention import JamParams, jam_forward
from .autodiff import Tensor
from .config import ExperimentConfig
from .encoders import CompressionHead, Encoder2D, Encoder3D
from .margin import ClassifierHead


class VerificationModel:
    def __init__(self, cfg: ExperimentConfig, num_classes: int):
        self.cfg = cfg
        self.num_classes = num_classes
        ss = np.random.SeedSequence([cfg.seed, 0xA11])
        r_enc2, r_enc3, r_jam, r_comp, r_h2, r_h3 = (
            np.random.default_rng(s) for s in ss.spawn(6)
        )
        self.enc2d = Encoder2D(cfg.dims, r_enc2)
        self.enc3d = Encoder3D(cfg.dims, r_enc3)
        self.jam = JamParams(
            cfg.dims.feature_channels,
            cfg.attn_channels,
            tied_gamma=cfg.tied_gamma,
            gamma_init=cfg.gamma_init,
            rng=r_jam,
        )
        self.compress = CompressionHead(cfg.dims, r_comp)
        self.head_2d = ClassifierHead(cfg.dims.embed_dim, num_classes, r_h2)
        self.head_3d = ClassifierHead(cfg.dims.embed_dim, num_classes, r_h3)

    # ------------------------------------------------------------------
    def embed_2d(self, image: Tensor, use_jam=None) -> tuple[Tensor, Tensor | None]:
        z = self.enc2d(image)
        attn = None
        if self.cfg.enable_jam if use_jam is None else use_jam:
            z, attn = jam_forward(z, self.jam, "2d")
        return self.compress(z), attn

    def embed_3d(self, cloud: Tensor, use_jam=None) -> tuple[Tensor, Tensor | None]:
        z = self.enc3d(cloud)
        attn = None
        if self.cfg.enable_jam if use_jam is None else use_jam:
            z, attn = jam_forward(z, self.jam, "3d")
        return self.compress(z), attn

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        """Detached 2D-path embeddings for a stack of images (inference)."""
        out = []
        for img in images:
            emb, _ = self.embed_2d(Tensor(img))
            out.append(emb.values[0])
        return np.array(out)

    # ------------------------------------------------------------------
    def batch_losses(
        self, images, clouds, labels, use_jam=None, use_je=None
    ) -> tuple[Tensor, dict]:
        """Total training loss for one aligned batch, on the active tape.

        ``use_jam``/``use_je`` override the config flags so a warm-start
        stage can run the plain 2D pipeline with the same model object.
        """
        cfg = self.cfg
        use_jam = cfg.enable_jam if use_jam is None else use_jam
        use_je = (cfg.enable_je if use_je is None else use_je) and use_jam
        labels = np.asarray(labels, dtype=int)
        batch = len(labels)

        embs2, attns2 = [], []
        for img in images:
            e, a = self.embed_2d(Tensor(img), use_jam)
            embs2.append(e)
            attns2.append(a)
        emb2 = ad.concat_rows(embs2)
        margin.norm_stats_update(
            self.head_2d, np.linalg.norm(emb2.values, axis=1), cfg.margin.t_a
        )
        l2d = margin.domain_loss(self.head_2d, emb2, labels, cfg.margin)
        parts = {"l_2d": float(l2d.values)}

        l3d = lje = None
        if use_jam:
            embs3, attns3 = [], []
            for cld in clouds:
                e, a = self.embed_3d(Tensor(cld), use_jam)
                embs3.append(e)
                attns3.append(a)
            emb3 = ad.concat_rows(embs3)
            margin.norm_stats_update(
                self.head_3d, np.linalg.norm(emb3.values, axis=1), cfg.margin.t_a
            )
            l3d = margin.domain_loss(self.head_3d, emb3, labels, cfg.margin)
            parts["l_3d"] = float(l3d.values)

            if use_je:
                acc = None
                for a2, a3 in zip(attns2, attns3):
                    term = entropy.je_loss(a2, a3, cfg.binning, cfg.je_mode)
                    acc = term if acc is None else ad.add(acc, term)
                lje = ad.scale(acc, 1.0 / batch)
                parts["l_je"] = float(lje.values)

        w = cfg.loss_weights
        if tuple(w) != (1.0, 1.0, 1.0):
            l2d = ad.scale(l2d, w[0])
            l3d = ad.scale(l3d, w[1]) if l3d is not None else None
            lje = ad.scale(lje, w[2]) if lje is not None else None
        loss = margin.total_loss(l2d, l3d, lje)
        parts["loss"] = float(loss.values)
        return loss, parts

    # ------------------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.enc2d.named_parameters())
        params.update(self.enc3d.named_parameters())
        params.update(self.jam.named_parameters())
        params.update(self.compress.named_parameters())
        params["head2d.w"] = self.head_2d.weights
        params["head3d.w"] = self.head_3d.weights
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.values for k, v in self.named_parameters().items()}

    def restore(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        missing = [k for k in params if k not in arrays]
        if strict and missing:
            raise KeyError(f"checkpoint is missing parameters: {missing}")
        for name, p in params.items():
            if name in arrays:
                got = np.asarray(arrays[name], dtype=np.float64)
                if got.shape != p.values.shape:
                    raise ValueError(
                        f"{name}: checkpoint shape {got.shape} != model "
                        f"{p.values.shape}"
                    )
                p.values = got.copy()
