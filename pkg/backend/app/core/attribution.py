"""
Gradientenbasierte Attribution: Aktivierungsmaximierung und Grad-CAM.

Aktualisierungsregeln der Aktivierungsmaximierung je Regularisierer:
    none: x_{t+1} = x_t + eps1 * da/dx
    tv:   x_{t+1} = x_t + eps1 * da/dx - eps2 * dTV/dx
    blur: x_{t+1} = r(x_t) + eps1 * da/dx, r = Gauß-Weichzeichner
Nach jedem Schritt wird das Bild auf den Clamp-Bereich begrenzt.
"""

import logging
from dataclasses import replace
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.ndimage import convolve1d, zoom

from backend.app.core.exceptions import ConfigError, NonFiniteValue, TargetUnresolvable
from backend.app.core.layers import Conv2D, Residual
from backend.app.core.local_sensitivity import as_network_input
from backend.app.core.network import Mode, Network, backward, forward, require_eval
from backend.app.models.configs import AMConfig, ClassLogit, FromImage, LayerNeuron, Regularizer
from backend.app.models.results import AMResult, AttributionMap

logger = logging.getLogger(__name__)


def tv_loss(image: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Anisotrope totale Variation eines Bildes (H x W oder H x W x C).

    Returns:
        Tuple[float, np.ndarray]: TV und Subgradient (0 bei exakt gleichen Nachbarn)
    """
    x = np.asarray(image, dtype=np.float64)
    dv = x[1:, :] - x[:-1, :]
    dh = x[:, 1:] - x[:, :-1]
    loss = float(np.abs(dv).sum() + np.abs(dh).sum())
    grad = np.zeros_like(x)
    sv, sh = np.sign(dv), np.sign(dh)
    grad[1:, :] += sv
    grad[:-1, :] -= sv
    grad[:, 1:] += sh
    grad[:, :-1] -= sh
    return loss, grad


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-d ** 2 / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, sigma: float = 1.0, radius: int = 2) -> np.ndarray:
    """
    Separabler Gauß-Weichzeichner über die beiden Raumachsen, je Kanal, mit Spiegelung am Rand.
    """
    if not sigma > 0 or radius < 1:
        raise ConfigError(f"Ungültiger Weichzeichner sigma={sigma}, radius={radius}")
    kernel = gaussian_kernel(sigma, radius)
    out = convolve1d(np.asarray(image, dtype=np.float64), kernel, axis=0, mode='reflect')
    return convolve1d(out, kernel, axis=1, mode='reflect')


def _user_layout(net: Network, grad: np.ndarray) -> np.ndarray:
    return grad.transpose(1, 2, 0) if len(net.input_shape) == 3 else grad


def image_shape(net: Network) -> Tuple[int, ...]:
    """Form eines Eingabebildes aus Nutzersicht (H x W x C für Bildnetze)."""
    if len(net.input_shape) == 3:
        c, h, w = net.input_shape
        return (h, w, c)
    return net.input_shape


def _resolve(net: Network, target) -> Tuple[int, int]:
    """Schichtindex und flacher Einheitenindex des Ziels."""
    if isinstance(target, ClassLogit):
        layer, index = len(net.layers) - 1, target.cls
    elif isinstance(target, LayerNeuron):
        layer, index = target.layer, target.index
        if not 0 <= layer < len(net.layers):
            raise TargetUnresolvable(f"Schicht {layer} existiert nicht (0..{len(net.layers) - 1})")
    else:
        raise TargetUnresolvable(f"Unbekannter Zieltyp {target!r}")
    units = int(np.prod(net.layer_shapes[layer]))
    if not 0 <= index < units:
        raise TargetUnresolvable(f"Einheit {index} existiert nicht in Schicht {layer} ({units} Einheiten)")
    return layer, index


def activation_gradient(net: Network, target) -> Callable[[np.ndarray], Tuple[float, np.ndarray]]:
    """Funktion x -> (Aktivierung des Ziels, Gradient bezüglich x) im Nutzerlayout."""
    layer, index = _resolve(net, target)

    def evaluate(x: np.ndarray) -> Tuple[float, np.ndarray]:
        trace = forward(net, as_network_input(net, x), until=layer, mode=Mode.EVAL)
        out = trace.output
        seed = np.zeros_like(out)
        seed.reshape(-1)[index] = 1.0
        grad = backward(net, trace, seed).input_grad[0]
        return float(out.reshape(-1)[index]), _user_layout(net, grad)

    return evaluate


def am_ascend(net: Network, cfg: AMConfig) -> AMResult:
    """
    Aktivierungsmaximierung durch Gradientenaufstieg auf dem Eingabebild.

    Args:
        net: Netz im Eval-Modus
        cfg: Ziel, Schrittweiten, Start und Regularisierer

    Returns:
        AMResult: Optimiertes Bild und Aktivierung nach jedem Schritt

    Raises:
        TargetUnresolvable: Wenn Schicht, Einheit oder Klasse nicht existiert
        NonFiniteValue: Wenn die Iteration divergiert (mit Schrittnummer)
    """
    require_eval(net)
    evaluate = activation_gradient(net, cfg.target)
    lo, hi = cfg.clamp
    x = np.clip(cfg.init_array(image_shape(net)), lo, hi)
    activation, grad = evaluate(x)
    initial = activation
    trace = []
    for step in range(1, cfg.steps + 1):
        if cfg.regularizer == Regularizer.TOTAL_VARIATION:
            _, tv_grad = tv_loss(x)
            x_next = x + cfg.eps1 * grad - cfg.eps2 * tv_grad
        elif cfg.regularizer == Regularizer.OPERATOR:
            x_next = gaussian_blur(x, cfg.blur_sigma, cfg.blur_radius) + cfg.eps1 * grad
        else:
            x_next = x + cfg.eps1 * grad
        if not np.all(np.isfinite(x_next)):
            logger.error(f"Aktivierungsmaximierung divergiert in Schritt {step}")
            raise NonFiniteValue(f"Bild nicht endlich in Schritt {step}", step=step)
        x = np.clip(x_next, lo, hi)
        try:
            activation, grad = evaluate(x)
        except NonFiniteValue as e:
            logger.error(f"Aktivierungsmaximierung divergiert in Schritt {step}")
            raise NonFiniteValue(f"Schritt {step}: {e}", step=step)
        trace.append(activation)
    logger.debug(f"AM {cfg.target}: {initial:.4g} -> {activation:.4g} in {cfg.steps} Schritten")
    return AMResult(image=x, activation_trace=trace, initial_activation=initial)


def predicted_class(net: Network, x: np.ndarray) -> int:
    out = forward(net, as_network_input(net, x), mode=Mode.EVAL).output[0]
    if out.size == 1:
        return int(out[0] > 0.5)
    return int(np.argmax(out))


def cross_class_am(net: Network, source_image: np.ndarray, target_class: int, cfg: AMConfig) -> AMResult:
    """
    Aktiviert ein vorhandenes Bild in Richtung einer (anderen) Klasse.

    Startbild ist immer source_image; das Ergebnis enthält zusätzlich die
    vorhergesagte Klasse des Quellbilds.
    """
    require_eval(net)
    source = np.asarray(source_image, dtype=np.float64)
    run_cfg = replace(cfg, target=ClassLogit(target_class), init=FromImage(source))
    result = am_ascend(net, run_cfg)
    result.source_class = predicted_class(net, source)
    logger.info(
        f"Klassenübergreifende AM: Quelle Klasse {result.source_class}, Ziel {target_class}, "
        f"Zugewinn {result.gain:.4g}"
    )
    return result


def default_cam_layer(net: Network) -> int:
    """Letzte Faltungs- oder Residualschicht der obersten Ebene."""
    for i in reversed(range(len(net.layers))):
        if isinstance(net.layers[i], (Conv2D, Residual)):
            return i
    raise TargetUnresolvable("Netz enthält keine Faltungsschicht für Grad-CAM")


def grad_cam(net: Network, image: np.ndarray, target_class: int,
             conv_layer: Optional[int] = None) -> AttributionMap:
    """
    Grad-CAM-Karte für eine Klasse.

    alpha_k = räumliches Mittel von d(Logit)/d(Merkmalskarte k),
    Karte = ReLU(sum_k alpha_k * Merkmalskarte_k), bilinear auf Bildgröße skaliert
    und bei positivem Maximum auf [0, 1] normiert.

    Raises:
        TargetUnresolvable: Wenn Schicht oder Klasse ungültig sind
    """
    require_eval(net)
    layer = default_cam_layer(net) if conv_layer is None else conv_layer
    if not 0 <= layer < len(net.layers) - 1 or len(net.layer_shapes[layer]) != 3:
        raise TargetUnresolvable(f"Schicht {layer} liefert keine Merkmalskarte")
    n_out = int(np.prod(net.output_shape))
    if not 0 <= target_class < n_out:
        raise TargetUnresolvable(f"Klasse {target_class} außerhalb von [0, {n_out})")
    x = as_network_input(net, image)
    trace = forward(net, x, mode=Mode.EVAL)
    seed = np.zeros_like(trace.output)
    seed[0, target_class] = 1.0
    grads = backward(net, trace, seed, stop=layer + 1).input_grad[0]
    features = trace.outputs[layer][0]
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, features, axes=1), 0.0)
    h, w = cam.shape
    height, width = x.shape[1], x.shape[2]
    upsampled = np.maximum(zoom(cam, (height / h, width / w), order=1), 0.0)
    peak = float(cam.max())
    if peak > 0:
        cam = cam / peak
        upsampled = upsampled / peak
    return AttributionMap(values=cam, upsampled=upsampled, target_class=target_class, layer=layer)
