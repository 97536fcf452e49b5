"""Simulation and fitting of molecular matter-wave diffraction at a
continuous deep-UV standing-wave light grating."""

__version__ = "1.0.0"

from .config import (ExperimentConfig, GeometrySpec, GratingSpec,
                     MoleculeSpec, SourceSpec, DetectorSpec, EnvironmentSpec,
                     Stations, parse_config, parse_quantity, serialize_config,
                     z_stations)
from .errors import (ConfigError, DataError, DuvDiffError, EmptyImageError,
                     NumericsError, TruncationError)
from .grating import (Channel, ChannelSet, FluorescenceKernel,
                      GratingStrength, KickDistribution, OrderTable,
                      channel_amplitudes, fluorescence_kernel,
                      grating_strength, kick_distribution,
                      modulation_contrast, order_table, poisson_mass_oracle,
                      second_moment)
from .beamline import (DetectorImage, ImageSynthesizer, QuadratureSpec,
                       SlitStation, Trajectory, VelocityGrid, propagate,
                       slit_pass, slit_stations, synthesize_image,
                       transverse_acceleration, velocity_grid)
from .imageproc import (RawImage, crop, despike, normalize_unity, rotate,
                        rss, subtract_background, subtract_plane,
                        vertical_smooth)
from .fitting import (FitStage1Params, FitStage2Params, HeatmapResult,
                      fit_stage1, fit_stage2, heatmap_csv,
                      integrate_horizontal)

__all__ = [name for name in dir() if not name.startswith("_")]
