
from setuptools import setup, find_packages

setup(
    name='omdalib',
    version='0.1.0',
    description='ordinal multi-instance domain adaptation',
    author='zgx',
    url='https://github.com/zgx/omdalib',
    packages=find_packages(exclude=['tests', 'examples', 'examples.*']),
    install_requires=[
        'numpy'
        ],
    extras_require={
        'test': ['pytest']
        },
    entry_points={
        'console_scripts': ['omdalib = omdalib.cli:main']
        }
)
