from pathlib import Path

from setuptools import find_packages, setup

root_dir = Path(__file__).absolute().parent

__version__ = None
exec(open(root_dir / "bidyn/version.py").read())  # Load __version__

long_description = (root_dir / "README.md").read_text()

setup(
    name="bidyn",
    version=__version__,
    package_dir={"": "."},
    packages=find_packages(exclude=("tests",), where="."),
    entry_points={"console_scripts": ["bidyn = bidyn.bidyn:main"]},
    install_requires=[
        "click",
        "numpy",
        "pyyaml",
        "ruamel.yaml",
        "scipy",
        "setuptools>=43",
        "torch",
    ],
    extras_require={"test": ["pytest", "pytest-mock"]},
    setup_requires=["setuptools>=43", "wheel"],
    python_requires=">=3.8",
    include_package_data=True,
    long_description=long_description,
    long_description_content_type="text/markdown",
)
