"""sonomap: acoustic-impedance volume reconstruction from posed scans,
hash-code plane retrieval, and photometric pose refinement."""

from ._kernels import BACKEND
from .dataset import DatasetEntry, ScanDataset, read_manifest, write_manifest
from .errors import (ContractError, FileFormatError, OutOfDomainError,
                     RefinementFailedError, SonomapError)
from .field import (GridConfig, ImpedanceField, PixelSample, decode, domain_from_poses,
                    encode_point, grid_resolution, hash_index, render_pixel, sh_encode)
from .geometry import (Pose, ProbeGeometry, angular_error_deg, image_plane_rays,
                       matrix_to_pose, pixel_to_world, pose_angular_error_deg,
                       pose_to_matrix)
from .image import ImageGray, psnr, read_pgm, ssim, write_pgm
from .localizer import (ConvEncoder, Gallery, HashCode, LocalizerConfig, augment,
                        binarize, class_predictions, encode_image, evaluate_retrieval,
                        hamming, loss_dhl, loss_hpl, loss_local, loss_ql, retrieve,
                        similarity_score, train_localizer)
from .phantom import (PhantomSpec, PhantomVolume, Primitive, export_dataset,
                      gen_phantom, gen_trajectory, sample_impedance, simulate_bmode)
from .refine import RefineConfig, RefineResult, photometric_loss, pose_gradient, refine
from .train import (AdamState, GradientBuffer, TrainConfig, adam_step, backward,
                    loss_recon, train)

__version__ = "0.1.0"
